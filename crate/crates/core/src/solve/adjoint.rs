//! Gradients of an ODE solution by the continuous adjoint method, plus the
//! direct backprop-through-solver route it is checked against.

use super::{solve_system, FnSystem, SolverConfig, TapeSystem, Trajectory};
use crate::diffcore::{NdArray, Tape, Var};
use crate::error::{Error, Result};

/// A vector field `F(t, state; θ)` that can be recorded on a tape.
pub trait ParamField {
    /// Parameter arrays in a fixed order.
    fn params(&self) -> Vec<&NdArray>;

    /// Record `F(t, state)` given the parameter handles (same order as `params`).
    fn eval(&self, tape: &mut Tape, params: &[Var], t: f64, state: Var) -> Result<Var>;
}

fn register(tape: &mut Tape, field: &dyn ParamField) -> Vec<Var> {
    field.params().into_iter().map(|p| tape.input(p.clone())).collect()
}

/// Evaluate the field without keeping the tape.
pub fn eval_plain(field: &dyn ParamField, t: f64, state: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let params: Vec<Var> = field.params().into_iter().map(|p| tape.constant(p.clone())).collect();
    let s = tape.constant(state.clone());
    let out = field.eval(&mut tape, &params, t, s)?;
    Ok(tape.value(out).clone())
}

/// `F(t, state)` together with the vector-Jacobian products
/// `cotangentᵀ ∂F/∂state` and `cotangentᵀ ∂F/∂θ`.
pub fn vjp(
    field: &dyn ParamField,
    t: f64,
    state: &NdArray,
    cotangent: &NdArray,
) -> Result<(NdArray, NdArray, Vec<NdArray>)> {
    let mut tape = Tape::new();
    let params = register(&mut tape, field);
    let s = tape.input(state.clone());
    let out = field.eval(&mut tape, &params, t, s)?;
    let grads = tape.backward_from(out, cotangent)?;
    Ok((
        tape.value(out).clone(),
        grads.wrt(s),
        params.iter().map(|&p| grads.wrt(p)).collect(),
    ))
}

/// Integrate on `tape` with parameters already registered there; returns the
/// step times and the state handle at each.
#[allow(clippy::too_many_arguments)]
pub fn integrate_on_tape(
    tape: &mut Tape,
    field: &dyn ParamField,
    params: &[Var],
    z0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<(Vec<f64>, Vec<Var>)> {
    let mut sys = TapeSystem {
        tape,
        field: |tape: &mut Tape, t: f64, y: Var| field.eval(tape, params, t, y),
    };
    solve_system(&mut sys, z0, t0, t1, cfg, breakpoints)
}

/// How the backward pass obtains the forward state.
#[derive(Clone, Copy, Debug)]
pub enum AdjointPolicy<'a> {
    /// Re-integrate the state backwards alongside the adjoint; O(1) memory.
    Recompute,
    /// Reset the state from a stored forward trajectory at each of its times.
    Checkpoint(&'a Trajectory),
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    /// dL/d(state at t0).
    pub grad_state: NdArray,
    /// dL/dθ, in `ParamField::params` order.
    pub grad_params: Vec<NdArray>,
    /// The state at t0 as reconstructed by the backward pass.
    pub state_t0: NdArray,
}

/// Solve the adjoint system from `t1` back to `t0`.
///
/// `seeds` are `(time, dL/dstate(time))` pairs; one must sit at `t1`, the
/// others inject extra loss terms at intermediate readout times (which must
/// also be breakpoints of the forward solve).
#[allow(clippy::too_many_arguments)]
pub fn integrate_adjoint(
    field: &dyn ParamField,
    state_t1: &NdArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
    seeds: &[(f64, NdArray)],
    policy: AdjointPolicy<'_>,
) -> Result<AdjointResult> {
    let n = state_t1.len();
    let shape = state_t1.shape().to_vec();
    let param_shapes: Vec<Vec<usize>> = field.params().iter().map(|p| p.shape().to_vec()).collect();
    let p_total: usize = param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let dir = (t1 - t0).signum();
    let between = |t: f64| (t - t0) * dir >= 0.0 && (t1 - t) * dir >= 0.0;

    for (t, seed) in seeds {
        if !between(*t) {
            return Err(Error::Input(format!("adjoint seed time {t} outside [{t0}, {t1}]")));
        }
        if seed.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "adjoint seed",
                left: seed.shape().to_vec(),
                right: shape.clone(),
            });
        }
    }

    // Stops on the way back: seed times, checkpoint times, then t0.
    let mut stop_times: Vec<f64> = seeds.iter().map(|(t, _)| *t).filter(|&t| t != t1).collect();
    if let AdjointPolicy::Checkpoint(tr) = policy {
        stop_times.extend(tr.times.iter().copied().filter(|&t| between(t) && t != t1));
    }
    stop_times.push(t0);
    stop_times.sort_by(|a, b| (b * dir).total_cmp(&(a * dir)));
    stop_times.dedup();

    let mut aug = vec![0.0; 2 * n + p_total];
    aug[..n].copy_from_slice(state_t1.data());
    let add_seeds = |aug: &mut [f64], at: f64| {
        for (t, seed) in seeds {
            if *t == at {
                for (a, s) in aug[n..2 * n].iter_mut().zip(seed.data()) {
                    *a += s;
                }
            }
        }
    };
    add_seeds(&mut aug, t1);

    let rhs = |t: f64, y: &NdArray| -> Result<NdArray> {
        let d = y.data();
        let z = NdArray::new(shape.clone(), d[..n].to_vec())?;
        let a = NdArray::new(shape.clone(), d[n..2 * n].to_vec())?;
        let (f, dz, dp) = vjp(field, t, &z, &a)?;
        let mut out = Vec::with_capacity(d.len());
        out.extend_from_slice(f.data());
        out.extend(dz.data().iter().map(|v| -v));
        for g in &dp {
            out.extend(g.data().iter().map(|v| -v));
        }
        NdArray::from_vec(out)
    };
    let mut sys = FnSystem(rhs);

    let mut t = t1;
    for stop in stop_times {
        let y = NdArray::from_vec(aug)?;
        let (_, states) = solve_system(&mut sys, y, t, stop, cfg, breakpoints)?;
        aug = states.into_iter().last().unwrap().into_data();
        t = stop;
        if let AdjointPolicy::Checkpoint(tr) = policy {
            if let Some(z) = tr.at(t) {
                aug[..n].copy_from_slice(z.data());
            }
        }
        add_seeds(&mut aug, t);
    }

    let mut grad_params = Vec::with_capacity(param_shapes.len());
    let mut offset = 2 * n;
    for s in param_shapes {
        let len: usize = s.iter().product();
        grad_params.push(NdArray::new(s, aug[offset..offset + len].to_vec())?);
        offset += len;
    }
    Ok(AdjointResult {
        grad_state: NdArray::new(shape.clone(), aug[n..2 * n].to_vec())?,
        state_t0: NdArray::new(shape, aug[..n].to_vec())?,
        grad_params,
    })
}
