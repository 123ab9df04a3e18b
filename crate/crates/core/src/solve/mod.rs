//! Explicit ODE integration: Euler, classical RK4 and Dormand–Prince 5(4).
//!
//! The stepping logic is written once against [`System`], so the same code
//! integrates plain arrays and records differentiable steps on a [`Tape`].

mod adjoint;

pub use adjoint::{
    eval_plain, integrate_adjoint, integrate_on_tape, vjp, AdjointPolicy, AdjointResult, ParamField,
};

use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Step size for the fixed-step methods.
    pub step_size: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Rk4,
            step_size: 0.5,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, step_size: f64) -> Self {
        SolverConfig {
            method,
            step_size,
            ..Default::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("solver.step_size", "must be a positive real"));
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(Error::config("solver.rtol/atol", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("solver.max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Accepted solver steps from `t0` to `t1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<NdArray>,
}

impl Trajectory {
    pub fn last(&self) -> &NdArray {
        self.states.last().expect("trajectory is never empty")
    }

    /// State recorded at exactly time `t` (breakpoints are hit exactly).
    pub fn at(&self, t: f64) -> Option<&NdArray> {
        self.times.iter().position(|&s| s == t).map(|i| &self.states[i])
    }
}

/// Something the steppers can advance: a right-hand side plus linear
/// combination of states.
pub trait System {
    type State: Clone;

    fn eval(&mut self, t: f64, y: &Self::State) -> Result<Self::State>;

    /// `y + Σ c_i·k_i`.
    fn combine(&mut self, y: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    fn values<'a>(&'a self, y: &'a Self::State) -> &'a [f64];
}

/// Plain closure over arrays.
pub struct FnSystem<F>(pub F);

impl<F> System for FnSystem<F>
where
    F: FnMut(f64, &NdArray) -> Result<NdArray>,
{
    type State = NdArray;

    fn eval(&mut self, t: f64, y: &NdArray) -> Result<NdArray> {
        (self.0)(t, y)
    }

    fn combine(&mut self, y: &NdArray, terms: &[(f64, &NdArray)]) -> Result<NdArray> {
        let mut out = y.clone();
        for &(c, k) in terms {
            if c != 0.0 {
                out.axpy(c, k)?;
            }
        }
        Ok(out)
    }

    fn values<'a>(&'a self, y: &'a NdArray) -> &'a [f64] {
        y.data()
    }
}

/// Closure that records its evaluations on a tape.
pub struct TapeSystem<'t, F> {
    pub tape: &'t mut Tape,
    pub field: F,
}

impl<F> System for TapeSystem<'_, F>
where
    F: FnMut(&mut Tape, f64, Var) -> Result<Var>,
{
    type State = Var;

    fn eval(&mut self, t: f64, y: &Var) -> Result<Var> {
        (self.field)(self.tape, t, *y)
    }

    fn combine(&mut self, y: &Var, terms: &[(f64, &Var)]) -> Result<Var> {
        let mut acc = *y;
        for &(c, k) in terms {
            if c != 0.0 {
                let s = self.tape.scale(*k, c)?;
                acc = self.tape.add(acc, s)?;
            }
        }
        Ok(acc)
    }

    fn values<'a>(&'a self, y: &'a Var) -> &'a [f64] {
        self.tape.value(*y).data()
    }
}

fn eval_checked<S: System>(sys: &mut S, t: f64, y: &S::State) -> Result<S::State> {
    let k = sys.eval(t, y)?;
    if sys.values(&k).iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(Error::NonFinite { t })
    }
}

fn euler_step_sys<S: System>(sys: &mut S, y: &S::State, t: f64, s: f64) -> Result<S::State> {
    let k1 = eval_checked(sys, t, y)?;
    sys.combine(y, &[(s, &k1)])
}

fn rk4_step_sys<S: System>(sys: &mut S, y: &S::State, t: f64, s: f64) -> Result<S::State> {
    let k1 = eval_checked(sys, t, y)?;
    let y2 = sys.combine(y, &[(s / 2.0, &k1)])?;
    let k2 = eval_checked(sys, t + s / 2.0, &y2)?;
    let y3 = sys.combine(y, &[(s / 2.0, &k2)])?;
    let k3 = eval_checked(sys, t + s / 2.0, &y3)?;
    let y4 = sys.combine(y, &[(s, &k3)])?;
    let k4 = eval_checked(sys, t + s, &y4)?;
    sys.combine(y, &[(s / 6.0, &k1), (s / 3.0, &k2), (s / 3.0, &k3), (s / 6.0, &k4)])
}

/// One explicit Euler step `z + s·f(z, t)`.
pub fn euler_step<F>(field: F, z: &NdArray, t: f64, s: f64) -> Result<NdArray>
where
    F: FnMut(f64, &NdArray) -> Result<NdArray>,
{
    check_step(s)?;
    euler_step_sys(&mut FnSystem(field), z, t, s)
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step<F>(field: F, z: &NdArray, t: f64, s: f64) -> Result<NdArray>
where
    F: FnMut(f64, &NdArray) -> Result<NdArray>,
{
    check_step(s)?;
    rk4_step_sys(&mut FnSystem(field), z, t, s)
}

fn check_step(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("step size {s} must be positive")))
    }
}

/// Integrate `dz/dt = field(t, z)` from `t0` to `t1` (either direction).
pub fn integrate<F>(field: F, z0: &NdArray, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &NdArray) -> Result<NdArray>,
{
    integrate_with_breakpoints(field, z0, t0, t1, cfg, &[])
}

/// As [`integrate`], landing a step boundary on every breakpoint in `(t0, t1)`.
pub fn integrate_with_breakpoints<F>(
    field: F,
    z0: &NdArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<Trajectory>
where
    F: FnMut(f64, &NdArray) -> Result<NdArray>,
{
    let (times, states) = solve_system(&mut FnSystem(field), z0.clone(), t0, t1, cfg, breakpoints)?;
    Ok(Trajectory { times, states })
}

/// Breakpoints strictly inside `(t0, t1)`, ordered in the direction of travel,
/// followed by `t1`.
fn stops(t0: f64, t1: f64, breakpoints: &[f64]) -> Vec<f64> {
    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
    let mut inner: Vec<f64> = breakpoints.iter().copied().filter(|&b| b > lo && b < hi).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    if t1 < t0 {
        inner.reverse();
    }
    inner.push(t1);
    inner
}

/// Number of equal substeps covering `len` with steps no longer than
/// `s·(1 + 1e-3)`.
pub(crate) fn substeps(len: f64, s: f64) -> usize {
    ((len.abs() / s) - 1e-3).ceil().max(1.0) as usize
}

/// Drive `sys` from `t0` to `t1`, returning every accepted step.
pub fn solve_system<S: System>(
    sys: &mut S,
    y0: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<(Vec<f64>, Vec<S::State>)> {
    cfg.validate()?;
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Input(format!("integration interval [{t0}, {t1}] must be finite and non-empty")));
    }
    match cfg.method {
        Method::Euler | Method::Rk4 => solve_fixed(sys, y0, t0, t1, cfg, breakpoints),
        Method::Dopri5 => solve_dopri5(sys, y0, t0, t1, cfg, breakpoints),
    }
}

fn solve_fixed<S: System>(
    sys: &mut S,
    y0: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<(Vec<f64>, Vec<S::State>)> {
    let mut times = vec![t0];
    let mut states = vec![y0];
    let mut steps = 0;
    let mut a = t0;
    for b in stops(t0, t1, breakpoints) {
        let n = substeps(b - a, cfg.step_size);
        let h = (b - a) / n as f64;
        for i in 0..n {
            if steps == cfg.max_steps {
                return Err(Error::MaxSteps { t: *times.last().unwrap() });
            }
            steps += 1;
            let t = a + i as f64 * h;
            let y = states.last().unwrap();
            let next = match cfg.method {
                Method::Euler => euler_step_sys(sys, y, t, h)?,
                _ => rk4_step_sys(sys, y, t, h)?,
            };
            times.push(if i + 1 == n { b } else { a + (i + 1) as f64 * h });
            states.push(next);
        }
        a = b;
    }
    Ok((times, states))
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth- minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

fn scaled_rms(y: &[f64], err: impl Iterator<Item = f64>, y_new: &[f64], cfg: &SolverConfig) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for (i, e) in err.enumerate() {
        let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
        acc += (e / sc).powi(2);
        n += 1;
    }
    (acc / n.max(1) as f64).sqrt()
}

fn initial_step<S: System>(sys: &mut S, t0: f64, y0: &S::State, f0: &S::State, dir: f64, cfg: &SolverConfig) -> Result<f64> {
    let norm = |v: &[f64], y: &[f64]| {
        (v.iter()
            .zip(y)
            .map(|(a, b)| (a / (cfg.atol + cfg.rtol * b.abs())).powi(2))
            .sum::<f64>()
            / v.len().max(1) as f64)
            .sqrt()
    };
    let y0v = sys.values(y0).to_vec();
    let d0 = norm(&y0v, &y0v);
    let d1 = norm(sys.values(f0), &y0v);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = sys.combine(y0, &[(dir * h0, f0)])?;
    let f1 = eval_checked(sys, t0 + dir * h0, &y1)?;
    let diff: Vec<f64> = sys.values(&f1).iter().zip(sys.values(f0)).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff, &y0v) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1))
}

fn solve_dopri5<S: System>(
    sys: &mut S,
    y0: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<(Vec<f64>, Vec<S::State>)> {
    let dir = (t1 - t0).signum();
    let mut times = vec![t0];
    let mut states = vec![y0.clone()];
    let mut t = t0;
    let mut y = y0;
    let mut k1 = eval_checked(sys, t, &y)?;
    let mut h = initial_step(sys, t, &y, &k1, dir, cfg)?.min((t1 - t0).abs());
    let mut err_prev: f64 = 1e-4;
    let mut attempts = 0;
    let mut rejected_last = false;

    for stop in stops(t0, t1, breakpoints) {
        while t != stop {
            if attempts == cfg.max_steps {
                return Err(Error::MaxSteps { t });
            }
            attempts += 1;
            let remaining = (stop - t).abs();
            let lands = h >= remaining;
            let step = if lands { remaining } else { h };
            if step < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Stiff { t, h: step });
            }
            let hs = dir * step;

            let mut ks: Vec<S::State> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for s in 1..7 {
                let terms: Vec<(f64, &S::State)> = A[s].iter().zip(&ks).map(|(&a, k)| (hs * a, k)).collect();
                let ys = sys.combine(&y, &terms)?;
                let k = eval_checked(sys, t + C[s] * hs, &ys)?;
                if s == 6 {
                    // the last stage input is the fifth-order solution (FSAL)
                    let err = {
                        let kv: Vec<&[f64]> = ks.iter().map(|k| sys.values(k)).chain([sys.values(&k)]).collect();
                        let n = kv[0].len();
                        let errs = (0..n).map(|i| hs * E.iter().zip(&kv).map(|(e, k)| e * k[i]).sum::<f64>());
                        scaled_rms(sys.values(&y), errs, sys.values(&ys), cfg)
                    };
                    if err <= 1.0 {
                        t = if lands { stop } else { t + hs };
                        y = ys;
                        k1 = k;
                        times.push(t);
                        states.push(y.clone());
                        let err = err.max(1e-10);
                        let mut fac = SAFETY * err.powf(-PI_ALPHA) * err_prev.powf(PI_BETA);
                        fac = fac.clamp(FAC_MIN, FAC_MAX);
                        if rejected_last {
                            fac = fac.min(1.0);
                        }
                        // a step shortened to hit a stop says little about the next one
                        h = if lands { h.max(step * fac) } else { step * fac };
                        err_prev = err.max(1e-4);
                        rejected_last = false;
                    } else {
                        h = step * (SAFETY * err.powf(-0.2)).max(FAC_MIN);
                        rejected_last = true;
                    }
                    break;
                }
                ks.push(k);
            }
        }
    }
    Ok((times, states))
}
