mod common;

use common::{bmv, columns, eval_field, max_abs_diff, toy_model, with_time};
use exitcde::field::ParamStore;
use exitcde::interp::TimeSeriesSample;
use exitcde::solve::{integrate, integrate_with_breakpoints};
use exitcde::{diffcore::finite_difference_grad, NdArray, Tape};

#[test]
fn identity_g_reduces_to_node() {
    for bounds in [(0.0, 19.0), (2.3, 14.6)] {
        let (y_dev, dz_dev) = common::node_reduction_deviation(bounds);
        assert!(y_dev < 1e-8 && dz_dev < 1e-8, "{bounds:?}: {y_dev} {dz_dev}");
    }
}

#[test]
fn constant_values_drive_encoder_along_time_column() {
    let times: Vec<f64> = (0..10).map(f64::from).collect();
    let rows = vec![vec![0.4, -1.1]; 10];
    let sample = TimeSeriesSample::dense(times.clone(), rows, None).unwrap();
    let m = toy_model((0.0, 19.0));
    let batch = m.prepare(&[&sample]).unwrap();
    let readouts = m.encode(&batch).unwrap();

    let x0 = NdArray::new(vec![1, 3], vec![0.4, -1.1, 0.0]).unwrap();
    let e0 = eval_field(&m.fields().phi_e, m.params(), &x0);
    let k = &m.fields().k;
    let dx = NdArray::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
    let oracle = integrate_with_breakpoints(
        |_, e: &NdArray| Ok(bmv(&eval_field(k, m.params(), e), &dx)),
        &e0,
        0.0,
        9.0,
        &m.spec().solver,
        &times,
    )
    .unwrap();
    for (i, &t) in times.iter().enumerate() {
        assert!(max_abs_diff(&readouts[i], oracle.at(t).unwrap()) < 1e-10, "t = {t}");
    }
}

#[test]
fn stacked_state_matches_separate_evaluations() {
    let m = toy_model((1.5, 16.0));
    let samples = common::toy_samples();
    let refs: Vec<&TimeSeriesSample> = samples.iter().collect();
    let batch = m.prepare(&refs).unwrap();
    let (z0, y0) = m.init_latent_states(&m.encode(&batch).unwrap(), &batch).unwrap();
    let (h, l) = (3, 3);
    let f = &m.fields().f;
    let g = &m.fields().g;
    let p = m.params();
    let s0 = NdArray::from_rows(
        &(0..3)
            .map(|i| [z0.row(i), y0.row(i)].concat())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let oracle = integrate(
        |t, s: &NdArray| {
            let z = columns(s, 0, h);
            let y = columns(s, h, l);
            let dy = eval_field(f, p, &with_time(&y, t));
            let dz = bmv(&eval_field(g, p, &z), &eval_field(f, p, &with_time(&y, t)));
            Ok(NdArray::from_rows(&(0..3).map(|i| [dz.row(i), dy.row(i)].concat()).collect::<Vec<_>>()).unwrap())
        },
        &s0,
        1.5,
        16.0,
        &m.spec().solver,
    )
    .unwrap();
    let tr = m.main_trajectory(&batch).unwrap();
    assert_eq!(tr.times, oracle.times);
    assert!(max_abs_diff(&columns(tr.last(), 0, h + l), oracle.last()) <= 1e-12);
}

#[test]
fn field_gradients_match_finite_differences() {
    let m = toy_model((0.0, 19.0));
    let x = NdArray::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.05, 0.9, -0.4]).unwrap();
    for field in [&m.fields().f, &m.fields().g, &m.fields().k] {
        let x = if field.input_width() == 4 { with_time(&x, 0.6) } else { x.clone() };
        let names = field.param_names();
        let seed_for = |out: &NdArray| NdArray::new(out.shape().to_vec(), (0..out.len()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

        let mut tape = Tape::new();
        let vars: Vec<_> = names.iter().map(|n| tape.param(n.clone(), m.params().get(n).unwrap().clone())).collect();
        let xv = tape.constant(x.clone());
        let out = field.forward(&mut tape, &vars, xv).unwrap();
        let seed = seed_for(tape.value(out));
        let grads = tape.backward_from(out, &seed).unwrap().params();

        for name in &names {
            let fd = finite_difference_grad(
                |v: &NdArray| {
                    let mut ps = ParamStore::new();
                    for n in &names {
                        ps.insert(n.clone(), if n == name { v.clone() } else { m.params().get(n).unwrap().clone() });
                    }
                    Ok(eval_field(field, &ps, &x).dot(&seed))
                },
                m.params().get(name).unwrap(),
                1e-6,
            )
            .unwrap();
            let r = exitcde::train::relative_error(&grads[name], &fd, 1e-6);
            assert!(r < 1e-6, "{name}: {r}");
        }
    }
}
