mod common;

use common::{rel, toy_setup as setup};
use exitcde::field::IntegrationBounds;
use exitcde::model::{Batch, ExitModel, GradMode, Objective, Targets};

#[test]
fn adjoint_matches_direct() {
    let (m, batch, targets) = setup((1.3, 17.2));
    let obj = Objective { c_kr: 0.1 };
    let d = m.loss_and_grads(&batch, &targets, &obj, GradMode::Direct).unwrap();
    let a = m.loss_and_grads(&batch, &targets, &obj, GradMode::Adjoint).unwrap();
    assert!(rel(d.loss, a.loss) < 1e-12, "{} {}", d.loss, a.loss);
    for ((n, gd), (_, ga)) in d.grads.iter().zip(a.grads.iter()) {
        let mut diff = gd.clone();
        diff.axpy(-1.0, ga).unwrap();
        let r = diff.norm() / gd.norm().max(ga.norm()).max(1e-12);
        println!("{n}: {r:e} ({:e})", gd.norm());
        assert!(r < 1e-4, "{n}: {r}");
    }
    println!("tau {} {} / {} {}", d.d_tau_start, a.d_tau_start, d.d_tau_end, a.d_tau_end);
    assert!(rel(d.d_tau_end, a.d_tau_end) < 1e-4);
    assert!(rel(d.d_tau_start, a.d_tau_start) < 1e-4);
}

fn loss_at(m: &ExitModel, batch: &Batch, targets: &Targets, obj: &Objective, s: f64, e: f64) -> f64 {
    let mut m = m.clone();
    let b = m.bounds();
    m.set_bounds(IntegrationBounds { tau_start: s, tau_end: e, ..b });
    m.loss(batch, targets, obj).unwrap().0
}

#[test]
fn tau_gradients_match_finite_differences() {
    for bounds in [(1.3, 17.2), (0.0, 19.0), (2.6, 22.5)] {
        let (m, batch, targets) = setup(bounds);
        let obj = Objective { c_kr: 0.1 };
        let g = m.loss_and_grads(&batch, &targets, &obj, GradMode::Adjoint).unwrap();
        let eps = 1e-5;
        let (s, e) = bounds;
        let fd_end = (loss_at(&m, &batch, &targets, &obj, s, e + eps) - loss_at(&m, &batch, &targets, &obj, s, e - eps)) / (2.0 * eps);
        let (sp, sm) = if s > 0.0 { (s + eps, s - eps) } else { (s + 2.0 * eps, s) };
        let fd_start = (loss_at(&m, &batch, &targets, &obj, sp, e) - loss_at(&m, &batch, &targets, &obj, sm, e)) / (sp - sm);
        println!("{bounds:?} end {} vs {fd_end}; start {} vs {fd_start}", g.d_tau_end, g.d_tau_start);
        assert!(rel(g.d_tau_end, fd_end) < 1e-4);
        if s > 0.0 {
            assert!(rel(g.d_tau_start, fd_start) < 1e-4);
        }
    }
}

#[test]
fn forward_is_finite_and_shaped() {
    let (m, batch, _) = setup((0.0, 19.0));
    let out = m.forward(&batch).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    assert!(out.is_finite());
}
