mod common;

use common::{dopri5_error_ratios, exponential_order};
use exitcde::solve::{integrate, integrate_with_breakpoints, Method, SolverConfig};
use exitcde::NdArray;

#[test]
fn euler_is_first_order() {
    let p = exponential_order(Method::Euler);
    assert!(p >= 0.9 && p < 1.2, "{p}");
}

#[test]
fn rk4_is_fourth_order() {
    let p = exponential_order(Method::Rk4);
    assert!(p >= 3.8 && p < 4.3, "{p}");
}

#[test]
fn dopri5_meets_tolerance() {
    for rtol in [1e-4, 1e-6, 1e-8] {
        let (e, r) = dopri5_error_ratios(rtol);
        assert!(e <= 50.0 && r <= 50.0, "rtol {rtol}: {e} {r}");
    }
}

#[test]
fn backward_integration_returns_to_start() {
    let cfg = SolverConfig::fixed(Method::Rk4, 0.01);
    let f = |t: f64, z: &NdArray| Ok(z.map(|v| -0.5 * v + t.sin()));
    let z0 = NdArray::new(vec![2], vec![1.0, -2.0]).unwrap();
    let fwd = integrate(f, &z0, 0.0, 3.0, &cfg).unwrap();
    let back = integrate(f, fwd.last(), 3.0, 0.0, &cfg).unwrap();
    for (a, b) in back.last().data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn breakpoints_are_hit_exactly() {
    let bps = [0.3, 1.0 / 3.0, 1.7, 2.05];
    for cfg in [SolverConfig::fixed(Method::Euler, 0.4), SolverConfig::dopri5(1e-6, 1e-9)] {
        let tr = integrate_with_breakpoints(|_, z: &NdArray| Ok(z.clone()), &NdArray::scalar(1.0), 0.0, 2.5, &cfg, &bps).unwrap();
        for b in bps {
            assert!(tr.at(b).is_some(), "{:?} missed {b}", cfg.method);
        }
        assert_eq!(*tr.times.last().unwrap(), 2.5);
    }
}

#[test]
fn step_count_tolerates_rounding() {
    // 1.0 / 0.1 is slightly above 10 in floating point.
    let tr = integrate(|_, z: &NdArray| Ok(z.clone()), &NdArray::scalar(1.0), 0.0, 1.0 + 1e-12, &SolverConfig::fixed(Method::Rk4, 0.1)).unwrap();
    assert_eq!(tr.times.len(), 11);
    let tr = integrate(|_, z: &NdArray| Ok(z.clone()), &NdArray::scalar(1.0), 0.0, 1.05, &SolverConfig::fixed(Method::Rk4, 0.1)).unwrap();
    assert_eq!(tr.times.len(), 12);
}

#[test]
fn empty_interval_is_rejected() {
    let r = integrate(|_, z: &NdArray| Ok(z.clone()), &NdArray::scalar(1.0), 1.0, 1.0, &SolverConfig::default());
    assert!(r.is_err());
}
