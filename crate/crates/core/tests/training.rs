mod common;

use common::{rel, toy_setup};
use exitcde::checkpoint::Checkpoint;
use exitcde::config::RunConfig;
use exitcde::data::{SyntheticKind, Task};
use exitcde::field::{FieldSpec, ParamStore};
use exitcde::model::{ExitMode, GradMode, Objective, Targets};
use exitcde::solve::{Method, SolverConfig};
use exitcde::train::{evaluate, Optimizer, TrainConfig, TrainReport};
use exitcde::NdArray;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.synthetic = Some(SyntheticKind::DampedSpiralClassification);
    cfg.data.samples = 24;
    cfg.data.steps = 10;
    cfg.data.split = [2.0, 1.0, 1.0];
    cfg.model.encoder_dim = 3;
    cfg.model.latent_dim = 3;
    cfg.model.hidden_dim = 3;
    cfg.model.n_enc = 3;
    cfg.model.k = FieldSpec::new(&[6], None);
    cfg.model.f = FieldSpec::new(&[6], None);
    cfg.model.g = FieldSpec::new(&[6], None);
    cfg.model.solver = SolverConfig::fixed(Method::Rk4, 0.5);
    cfg.train.max_epochs = 4;
    cfg.train.batch_size = 6;
    cfg.train.lr = 5e-2;
    cfg.train.lr_tau = 0.5;
    cfg
}

fn without_time(mut r: TrainReport) -> TrainReport {
    r.wall_time_secs = 0.0;
    r
}

#[test]
fn zero_lr_tau_keeps_bounds_fixed() {
    let mut cfg = tiny_config();
    cfg.train.lr_tau = 0.0;
    let out = cfg.run().unwrap();
    let t = out.splits.terminal().unwrap();
    for r in &out.report.epochs {
        assert_eq!((r.tau_start, r.tau_end), (0.0, t));
    }
}

#[test]
fn fixed_exit_keeps_the_data_domain() {
    let mut cfg = tiny_config();
    cfg.mode = ExitMode::FixedExit;
    let out = cfg.run().unwrap();
    let t = out.splits.terminal().unwrap();
    let b = out.model.bounds();
    assert_eq!((b.tau_start, b.tau_end), (0.0, t));
}

#[test]
fn terminal_exit_pins_the_start() {
    let mut cfg = tiny_config();
    cfg.mode = ExitMode::TerminalExit;
    let out = cfg.run().unwrap();
    assert!(out.report.epochs.iter().all(|r| r.tau_start == 0.0));
}

#[test]
fn trace_is_feasible_and_returned_model_is_best() {
    let out = tiny_config().run().unwrap();
    for r in &out.report.epochs {
        assert!(r.tau_start >= 0.0 && r.tau_start < r.tau_end, "{r:?}");
    }
    let best = out.report.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert!(out.report.best_val_loss <= best);
    let again = evaluate(&out.model, &out.splits.val, &out.config.train.objective()).unwrap();
    assert_eq!(again.loss, out.report.best_val_loss);
    if out.report.best_epoch > 0 {
        let r = &out.report.epochs[out.report.best_epoch - 1];
        assert_eq!((r.tau_start, r.tau_end), (out.model.bounds().tau_start, out.model.bounds().tau_end));
    }
}

#[test]
fn same_seed_same_report_and_bit_exact_checkpoint() {
    let cfg = tiny_config();
    let a = cfg.run().unwrap();
    let b = cfg.run().unwrap();
    assert_eq!(without_time(a.report.clone()), without_time(b.report));
    assert_eq!(a.report.to_jsonl(), cfg.run().unwrap().report.to_jsonl());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::new(&a.model, cfg.seed, a.splits.train.task, a.splits.normalizer.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    for s in &a.splits.test.samples {
        let (p, q) = (a.model.predict(s).unwrap(), loaded.predict(s).unwrap());
        assert!(p.iter().zip(&q).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn different_seeds_differ() {
    let a = tiny_config().run().unwrap();
    let mut cfg = tiny_config();
    cfg.seed = 4;
    let b = cfg.run().unwrap();
    assert_ne!(a.report.to_jsonl(), b.report.to_jsonl());
}

#[test]
fn weight_decay_touches_only_mappers_and_head() {
    let (m, _, _) = toy_setup((0.0, 19.0));
    let cfg = TrainConfig {
        lr: 0.1,
        c_wd: 0.5,
        ..Default::default()
    };
    let mut params = m.params().clone();
    let mut zeros = ParamStore::new();
    for (n, p) in params.iter() {
        zeros.insert(n.clone(), NdArray::zeros(p.shape()));
    }
    Optimizer::new(&cfg).step(&mut params, &zeros).unwrap();
    for ((name, before), (_, after)) in m.params().iter().zip(params.iter()) {
        let group = name.split('.').next().unwrap();
        let factor = if ["phi_e", "phi_z", "phi_y", "output"].contains(&group) { 0.95 } else { 1.0 };
        for (x, y) in before.data().iter().zip(after.data()) {
            assert!((x * factor - y).abs() <= 1e-15 * x.abs(), "{name}");
        }
    }
}

#[test]
fn zero_task_loss_gives_zero_gradients() {
    let (m, batch, _) = toy_setup((1.0, 15.0));
    let targets = Targets::Values(m.forward(&batch).unwrap());
    let obj = Objective { c_kr: 0.0 };
    for mode in [GradMode::Direct, GradMode::Adjoint] {
        let g = m.loss_and_grads(&batch, &targets, &obj, mode).unwrap();
        assert!(g.loss.abs() < 1e-24);
        assert!(g.grads.iter().all(|(_, a)| a.max_abs() < 1e-12));
        assert!(g.d_tau_start.abs() < 1e-12 && g.d_tau_end.abs() < 1e-12);
    }
}

#[test]
fn kinetic_term_adds_to_the_loss() {
    let (m, batch, targets) = toy_setup((1.0, 15.0));
    let (plain, task0) = m.loss(&batch, &targets, &Objective { c_kr: 0.0 }).unwrap();
    let (reg, task1) = m.loss(&batch, &targets, &Objective { c_kr: 0.3 }).unwrap();
    assert_eq!(plain, task0);
    assert!(rel(task0, task1) < 1e-15);
    assert!(reg > plain);
}

#[test]
fn forecasting_run_reports_mse() {
    let mut cfg = tiny_config();
    cfg.data.synthetic = Some(SyntheticKind::ArForecasting);
    cfg.data.horizon = 2;
    cfg.data.steps = 8;
    cfg.train.max_epochs = 2;
    let out = cfg.run().unwrap();
    assert!(matches!(out.splits.train.task, Task::Forecasting { .. }));
    let test = out.test.unwrap();
    assert!(test.auroc.is_none());
    assert!(test.metric >= 0.0 && test.metric.is_finite());
}
