#![allow(dead_code)]

use exitcde::field::{Activation, FieldSpec, IntegrationBounds, MlpField, ParamStore};
use exitcde::interp::TimeSeriesSample;
use exitcde::model::{Batch, ExitMode, ExitModel, ModelSpec, Targets};
use exitcde::solve::{Method, SolverConfig};
use exitcde::{NdArray, Tape};

/// Three smooth two-channel samples on the integer grid 0..=19.
pub fn toy_samples() -> Vec<TimeSeriesSample> {
    (0..3)
        .map(|k| {
            let times: Vec<f64> = (0..20).map(f64::from).collect();
            let rows = times
                .iter()
                .map(|&t| vec![(0.3 * t + k as f64).sin(), 0.5 * (0.2 * t * (k + 1) as f64).cos()])
                .collect();
            TimeSeriesSample::dense(times, rows, None).unwrap()
        })
        .collect()
}

pub fn toy_spec() -> ModelSpec {
    ModelSpec {
        input_channels: 2,
        encoder_dim: 3,
        latent_dim: 3,
        hidden_dim: 3,
        n_enc: 4,
        output_dim: 2,
        k: FieldSpec::new(&[6], None),
        f: FieldSpec::new(&[6], None),
        g: FieldSpec::new(&[6], None),
        solver: SolverConfig::fixed(Method::Rk4, 0.25),
        ..Default::default()
    }
}

pub fn toy_model(bounds: (f64, f64)) -> ExitModel {
    let mut m = ExitModel::new(toy_spec(), 19.0, ExitMode::Exit, 11).unwrap();
    m.set_bounds(IntegrationBounds {
        tau_start: bounds.0,
        tau_end: bounds.1,
        terminal: 19.0,
    });
    m
}

pub fn toy_setup(bounds: (f64, f64)) -> (ExitModel, Batch, Targets) {
    let m = toy_model(bounds);
    let samples = toy_samples();
    let refs: Vec<&TimeSeriesSample> = samples.iter().collect();
    let batch = m.prepare(&refs).unwrap();
    (m, batch, Targets::Classes(vec![0, 1, 1]))
}

/// Evaluate one field on plain arrays.
pub fn eval_field(field: &MlpField, params: &ParamStore, x: &NdArray) -> NdArray {
    let mut tape = Tape::new();
    let p: Vec<_> = params.field(field).unwrap().into_iter().map(|a| tape.constant(a.clone())).collect();
    let x = tape.constant(x.clone());
    let y = field.forward(&mut tape, &p, x).unwrap();
    tape.value(y).clone()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn max_abs_diff(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Columns `start..start+len` of a `[batch, width]` array.
pub fn columns(x: &NdArray, start: usize, len: usize) -> NdArray {
    let b = x.shape()[0];
    let data = (0..b).flat_map(|i| x.row(i)[start..start + len].to_vec()).collect();
    NdArray::new(vec![b, len], data).unwrap()
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn fitted_order(steps: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Observed order of a fixed-step method on `z' = z`, `z(0) = 1`, over `[0, 1]`.
pub fn exponential_order(method: Method) -> f64 {
    let steps = [0.1, 0.05, 0.025, 0.0125];
    let errors: Vec<f64> = steps
        .iter()
        .map(|&h| {
            let tr = exitcde::solve::integrate(
                |_, z: &NdArray| Ok(z.clone()),
                &NdArray::scalar(1.0),
                0.0,
                1.0,
                &SolverConfig::fixed(method, h),
            )
            .unwrap();
            (tr.last().item() - 1f64.exp()).abs()
        })
        .collect();
    fitted_order(&steps, &errors)
}

/// Dopri5 errors on `z' = z` over `[0, 1]` and on a unit rotation over one
/// period, each divided by `rtol`.
pub fn dopri5_error_ratios(rtol: f64) -> (f64, f64) {
    let cfg = SolverConfig::dopri5(rtol, rtol * 1e-3);
    let e = exitcde::solve::integrate(|_, z: &NdArray| Ok(z.clone()), &NdArray::scalar(1.0), 0.0, 1.0, &cfg).unwrap();
    let exp_err = (e.last().item() - 1f64.exp()).abs() / 1f64.exp();
    let period = 2.0 * std::f64::consts::PI;
    let r = exitcde::solve::integrate(
        |_, z: &NdArray| NdArray::new(vec![2], vec![-z.data()[1], z.data()[0]]),
        &NdArray::new(vec![2], vec![1.0, 0.0]).unwrap(),
        0.0,
        period,
        &cfg,
    )
    .unwrap();
    let rot_err = ((r.last().data()[0] - 1.0).powi(2) + r.last().data()[1].powi(2)).sqrt();
    (exp_err / rtol, rot_err / rtol)
}

/// Worst deviations of a natural spline on irregular knots.
#[derive(Debug)]
pub struct SplineDeviations {
    pub at_knots: f64,
    pub c1_jump: f64,
    pub c2_jump: f64,
    pub boundary_curvature: f64,
    pub affine: f64,
}

pub fn spline_deviations(seed: u64) -> SplineDeviations {
    use exitcde::interp::CubicSpline;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut knots = vec![0.0];
    for _ in 0..24 {
        let last = *knots.last().unwrap();
        knots.push(last + rng.random_range(0.05..1.5));
    }
    let values: Vec<f64> = knots.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
    let s = CubicSpline::natural(&knots, &values).unwrap();
    let mut d = SplineDeviations {
        at_knots: 0.0,
        c1_jump: 0.0,
        c2_jump: 0.0,
        boundary_curvature: 0.0,
        affine: 0.0,
    };
    for (t, v) in knots.iter().zip(&values) {
        d.at_knots = d.at_knots.max((s.eval(*t) - v).abs());
    }
    for i in 1..knots.len() - 1 {
        let left = s.piece_eval(i - 1, knots[i]);
        let right = s.piece_eval(i, knots[i]);
        d.c1_jump = d.c1_jump.max((left[1] - right[1]).abs());
        d.c2_jump = d.c2_jump.max((left[2] - right[2]).abs());
    }
    let n = knots.len();
    d.boundary_curvature = s.piece_eval(0, knots[0])[2].abs().max(s.piece_eval(n - 2, knots[n - 1])[2].abs());

    let affine: Vec<f64> = knots.iter().map(|t| 0.7 - 1.9 * t).collect();
    let a = CubicSpline::natural(&knots, &affine).unwrap();
    for k in 0..200 {
        let t = knots[n - 1] * k as f64 / 199.0;
        let dev = (a.eval(t) - (0.7 - 1.9 * t)).abs().max((a.derivative(t) + 1.9).abs());
        d.affine = d.affine.max(dev);
    }
    d
}

/// Stack `[t | y]` column-wise.
pub fn with_time(y: &NdArray, t: f64) -> NdArray {
    let b = y.shape()[0];
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let mut r = y.row(i).to_vec();
            r.push(t);
            r
        })
        .collect();
    NdArray::from_rows(&rows).unwrap()
}

/// Batched `m·v` for `m: [b, r, c]`, `v: [b, c]`.
pub fn bmv(m: &NdArray, v: &NdArray) -> NdArray {
    let (b, r, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let mut out = vec![0.0; b * r];
    for i in 0..b {
        for j in 0..r {
            out[i * r + j] = (0..c).map(|k| m.data()[(i * r + j) * c + k] * v.data()[i * c + k]).sum();
        }
    }
    NdArray::new(vec![b, r], out).unwrap()
}

/// Toy model whose `g` outputs the identity for every `z`.
pub fn identity_g_model(bounds: (f64, f64)) -> ExitModel {
    let spec = ModelSpec {
        input_channels: 2,
        encoder_dim: 3,
        latent_dim: 3,
        hidden_dim: 3,
        n_enc: 4,
        output_dim: 2,
        k: FieldSpec::new(&[6], None),
        f: FieldSpec::new(&[6], None),
        g: FieldSpec::new(&[], Some(&[Activation::None])),
        solver: SolverConfig::fixed(Method::Rk4, 0.25),
        ..Default::default()
    };
    let mut m = ExitModel::new(spec, 19.0, ExitMode::Exit, 5).unwrap();
    let p = m.params_mut();
    let w = p.get_mut("g.0.weight").unwrap();
    *w = NdArray::zeros(w.shape());
    *p.get_mut("g.0.bias").unwrap() = NdArray::eye(3).reshape(&[9]).unwrap();
    m.set_bounds(IntegrationBounds {
        tau_start: bounds.0,
        tau_end: bounds.1,
        terminal: 19.0,
    });
    m
}

/// Largest deviations `(|Y − Y_node|, |(z − z0) − (Y − Y0)|)` for the
/// identity-`g` model against an independently integrated plain ODE in `Y`.
pub fn node_reduction_deviation(bounds: (f64, f64)) -> (f64, f64) {
    let m = identity_g_model(bounds);
    let samples = toy_samples();
    let refs: Vec<&TimeSeriesSample> = samples.iter().collect();
    let batch = m.prepare(&refs).unwrap();
    let (z0, y0) = m.init_latent_states(&m.encode(&batch).unwrap(), &batch).unwrap();
    let tr = m.main_trajectory(&batch).unwrap();
    let (h, l) = (m.spec().hidden_dim, m.spec().latent_dim);
    let z = columns(tr.last(), 0, h);
    let y = columns(tr.last(), h, l);
    let f = &m.fields().f;
    let node = exitcde::solve::integrate(
        |t, y: &NdArray| Ok(eval_field(f, m.params(), &with_time(y, t))),
        &y0,
        bounds.0,
        bounds.1,
        &m.spec().solver,
    )
    .unwrap();
    let mut dz = z;
    dz.axpy(-1.0, &z0).unwrap();
    let mut dy = y.clone();
    dy.axpy(-1.0, &y0).unwrap();
    (max_abs_diff(&y, node.last()), max_abs_diff(&dz, &dy))
}
