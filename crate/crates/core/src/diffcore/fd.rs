use super::array::NdArray;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_grad<F>(mut f: F, p: &NdArray, eps: f64) -> Result<NdArray>
where
    F: FnMut(&NdArray) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Evaluation(format!("eps {eps} must lie in (0, 1e-2]")));
    }
    let mut probe = p.clone();
    let mut grad = NdArray::zeros_like(p);
    for i in 0..p.len() {
        let x = p.data()[i];
        probe.data_mut()[i] = x + eps;
        let hi = checked(f(&probe)?, i)?;
        probe.data_mut()[i] = x - eps;
        let lo = checked(f(&probe)?, i)?;
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Central difference of a scalar function of one real variable.
pub fn finite_difference_scalar<F>(mut f: F, x: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let g = finite_difference_grad(|p| f(p.item()), &NdArray::scalar(x), eps)?;
    Ok(g.item())
}

fn checked(v: f64, coord: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!(
            "non-finite function value {v} while perturbing coordinate {coord}"
        )))
    }
}
