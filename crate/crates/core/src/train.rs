//! Training: losses, the parameter and bound updates, validation-based
//! model selection, and gradient checking.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::diffcore::{finite_difference_grad, NdArray, Tape};
use crate::error::{Error, Result};
use crate::field::{IntegrationBounds, ParamStore, Role};
use crate::interp::{Label, TimeSeriesSample};
use crate::metrics;
use crate::model::{clamp_bounds, Batch, ExitMode, ExitModel, GradMode, LossGrads, Objective, Targets};

/// Mean cross-entropy or mean squared error of a batch of predictions.
pub fn task_loss(prediction: &NdArray, targets: &Targets) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prediction.clone());
    let l = crate::model::record_task_loss(&mut tape, p, targets)?;
    Ok(tape.value(l).item())
}

/// Mean of `‖dz/dt‖²` over the given dynamics evaluations.
pub fn kinetic_penalty(derivatives: &[NdArray]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::Input("kinetic penalty of an empty trajectory".into()));
    }
    Ok(derivatives.iter().map(|d| d.dot(d)).sum::<f64>() / derivatives.len() as f64)
}

/// `aᵀ·(G·f)` for `G` of shape `[h, y]` (or `[batch, h, y]`), `f` of shape
/// `[y]` (or `[batch, y]`) and `a` of shape `[h]` (or `[batch, h]`).
fn chain_product(a: &NdArray, g_out: &NdArray, f_out: &NdArray) -> Result<f64> {
    let (g3, f2, a2) = match (g_out.ndim(), f_out.ndim(), a.ndim()) {
        (2, 1, 1) => (
            g_out.reshape(&[1, g_out.shape()[0], g_out.shape()[1]])?,
            f_out.reshape(&[1, f_out.len()])?,
            a.reshape(&[1, a.len()])?,
        ),
        (3, 2, 2) => (g_out.clone(), f_out.clone(), a.clone()),
        _ => {
            return Err(Error::Shape {
                op: "tau gradient",
                left: g_out.shape().to_vec(),
                right: f_out.shape().to_vec(),
            })
        }
    };
    let (b, h, y) = (g3.shape()[0], g3.shape()[1], g3.shape()[2]);
    if f2.shape() != [b, y] || a2.shape() != [b, h] {
        return Err(Error::Shape {
            op: "tau gradient",
            left: vec![b, h, y],
            right: f2.shape().iter().chain(a2.shape()).copied().collect(),
        });
    }
    let mut s = 0.0;
    for i in 0..b {
        for r in 0..h {
            let row = &g3.data()[(i * h + r) * y..(i * h + r + 1) * y];
            let gf: f64 = row.iter().zip(f2.row(i)).map(|(g, f)| g * f).sum();
            s += a2.row(i)[r] * gf;
        }
    }
    Ok(s)
}

/// `dL/dτ_end = a_z(τ_end)ᵀ·g(z(τ_end))·f(Y(τ_end), τ_end)`.
pub fn tau_end_gradient(a_z: &NdArray, g_out: &NdArray, f_out: &NdArray) -> Result<f64> {
    chain_product(a_z, g_out, f_out)
}

/// `a_z(τ_start)ᵀ·g(z(τ_start))·f(Y(τ_start), τ_start)`, the z-block flux
/// through the lower bound. The full lower-bound derivative used by
/// [`ExitModel::loss_and_grads`] is `φ_z`'s sensitivity term minus the flux
/// of the whole stacked state.
pub fn tau_start_gradient(a_z: &NdArray, g_out: &NdArray, f_out: &NdArray) -> Result<f64> {
    chain_product(a_z, g_out, f_out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Parameter learning rate λ.
    pub lr: f64,
    /// Bound learning rate λ_τ.
    pub lr_tau: f64,
    /// Kinetic regularization coefficient.
    pub c_kr: f64,
    /// Weight decay coefficient for φ_e, φ_z, φ_Y and the output head.
    pub c_wd: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a train-loss improvement before stopping.
    pub patience: usize,
    pub grad_mode: GradMode,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Each minibatch is split into this many chunks evaluated in parallel.
    pub chunks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            lr_tau: 1e-1,
            c_kr: 0.0,
            c_wd: 0.0,
            max_epochs: 100,
            batch_size: 32,
            patience: 50,
            grad_mode: GradMode::Adjoint,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            chunks: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.lr_tau >= 0.0 && self.lr_tau.is_finite()) {
            return Err(Error::config("train.lr_tau", "must be non-negative"));
        }
        if !(self.c_kr >= 0.0) || !(self.c_wd >= 0.0) {
            return Err(Error::config("train.c_kr/c_wd", "must be non-negative"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.chunks == 0 {
            return Err(Error::config("train", "max_epochs, batch_size and chunks must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !pos(self.adam_eps) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective { c_kr: self.c_kr }
    }
}

fn is_decayed(name: &str) -> bool {
    Role::ALL
        .iter()
        .filter(|r| r.is_decayed())
        .any(|r| name.starts_with(r.prefix()) && name[r.prefix().len()..].starts_with('.'))
}

/// Parameter optimizer with decoupled weight decay on the mapper and output
/// groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    c_wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            c_wd: cfg.c_wd,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Input(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if self.c_wd > 0.0 && is_decayed(name) {
                let k = 1.0 - self.lr * self.c_wd;
                p.data_mut().iter_mut().for_each(|w| *w *= k);
            }
            match self.kind {
                OptimizerKind::Sgd => p.axpy(-self.lr, g)?,
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Apply one bound update `τ ← τ − λ_τ·dL/dτ` for the trainable bounds, then
/// repair with [`clamp_bounds`].
pub fn update_bounds(bounds: IntegrationBounds, mode: ExitMode, lr_tau: f64, d_start: f64, d_end: f64) -> IntegrationBounds {
    let mut b = bounds;
    if mode.trains_start() {
        b.tau_start -= lr_tau * d_start;
    }
    if mode.trains_end() {
        b.tau_end -= lr_tau * d_end;
    }
    clamp_bounds(b, mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for classification, MSE for forecasting.
    pub val_metric: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned snapshot (0 = initial parameters).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Targets of a set of samples.
pub fn targets_of(samples: &[&TimeSeriesSample], task: &Task) -> Result<Targets> {
    match task {
        Task::Classification { .. } => samples
            .iter()
            .map(|s| s.class().ok_or_else(|| Error::Input("sample without class label".into())))
            .collect::<Result<Vec<_>>>()
            .map(Targets::Classes),
        Task::Forecasting { .. } => {
            let rows = samples
                .iter()
                .map(|s| match &s.label {
                    Some(Label::Target(t)) => Ok(t.clone()),
                    _ => Err(Error::Input("sample without forecasting target".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Targets::Values(NdArray::from_rows(&rows)?))
        }
    }
}

/// Group indices by time grid (first-appearance order) and cut each group
/// into batches of at most `batch_size`.
pub fn grid_batches(samples: &[TimeSeriesSample], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<(Vec<u64>, Vec<usize>)> = Vec::new();
    for &i in order {
        let key: Vec<u64> = samples[i].times.iter().map(|t| t.to_bits()).collect();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups
        .into_iter()
        .flat_map(|(_, v)| v.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Loss and gradients of one minibatch, split into `chunks` parts evaluated
/// in parallel and combined in a fixed order.
pub fn batch_loss_and_grads(model: &ExitModel, ds: &Dataset, idx: &[usize], obj: &Objective, mode: GradMode, chunks: usize) -> Result<LossGrads> {
    let size = idx.len().div_ceil(chunks.max(1));
    let parts: Vec<&[usize]> = idx.chunks(size).collect();
    let results = parts
        .par_iter()
        .map(|part| {
            let samples: Vec<&TimeSeriesSample> = part.iter().map(|&i| &ds.samples[i]).collect();
            let batch = model.prepare(&samples)?;
            let targets = targets_of(&samples, &ds.task)?;
            model.loss_and_grads(&batch, &targets, obj, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = idx.len() as f64;
    let mut out: Option<LossGrads> = None;
    for (part, r) in parts.iter().zip(results) {
        let w = part.len() as f64 / n;
        match &mut out {
            None => {
                let mut grads = ParamStore::new();
                for (k, g) in r.grads.iter() {
                    grads.insert(k.clone(), g.scaled(w));
                }
                out = Some(LossGrads {
                    loss: w * r.loss,
                    task_loss: w * r.task_loss,
                    grads,
                    d_tau_start: w * r.d_tau_start,
                    d_tau_end: w * r.d_tau_end,
                });
            }
            Some(acc) => {
                acc.loss += w * r.loss;
                acc.task_loss += w * r.task_loss;
                acc.d_tau_start += w * r.d_tau_start;
                acc.d_tau_end += w * r.d_tau_end;
                for (k, g) in r.grads.iter() {
                    acc.grads.get_mut(k).expect("same parameter set").axpy(w, g)?;
                }
            }
        }
    }
    out.ok_or_else(|| Error::Input("empty minibatch".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Objective including the kinetic term.
    pub loss: f64,
    pub task_loss: f64,
    /// Accuracy for classification, MSE for forecasting.
    pub metric: f64,
    pub auroc: Option<f64>,
}

/// Predictions for every sample, in dataset order, `[n, output_dim]`.
pub fn predict_dataset(model: &ExitModel, ds: &Dataset) -> Result<NdArray> {
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut rows = vec![Vec::new(); ds.len()];
    for idx in grid_batches(&ds.samples, &order, 256) {
        let samples: Vec<&TimeSeriesSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        let out = model.forward(&model.prepare(&samples)?)?;
        for (k, &i) in idx.iter().enumerate() {
            rows[i] = out.row(k).to_vec();
        }
    }
    NdArray::from_rows(&rows)
}

pub fn evaluate(model: &ExitModel, ds: &Dataset, obj: &Objective) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut task) = (0.0, 0.0);
    for idx in grid_batches(&ds.samples, &order, 256) {
        let samples: Vec<&TimeSeriesSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        let batch = model.prepare(&samples)?;
        let (l, t) = model.loss(&batch, &targets_of(&samples, &ds.task)?, obj)?;
        let w = idx.len() as f64 / ds.len() as f64;
        loss += w * l;
        task += w * t;
    }
    let pred = predict_dataset(model, ds)?;
    let all: Vec<&TimeSeriesSample> = ds.samples.iter().collect();
    let (metric, auroc) = match targets_of(&all, &ds.task)? {
        Targets::Classes(c) => (metrics::accuracy(&pred, &c)?, metrics::auroc_from_logits(&pred, &c).ok()),
        Targets::Values(v) => (metrics::mse(&pred, &v)?, None),
    };
    Ok(Evaluation {
        loss,
        task_loss: task,
        metric,
        auroc,
    })
}

fn is_divergence(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } | Error::MaxSteps { .. } | Error::Stiff { .. } => true,
        Error::Stage { source, .. } => is_divergence(source),
        _ => false,
    }
}

fn all_finite(g: &LossGrads) -> bool {
    g.loss.is_finite() && g.d_tau_start.is_finite() && g.d_tau_end.is_finite() && g.grads.iter().all(|(_, a)| a.is_finite())
}

/// Train with minibatch updates of the parameters and the bounds, keeping
/// the snapshot with the lowest validation loss (train loss when `val` is
/// empty). Returns that snapshot and the per-epoch report.
pub fn fit(model: ExitModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(ExitModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let start = Instant::now();
    let obj = cfg.objective();
    let mut model = model;
    let mut opt = Optimizer::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let select = |m: &ExitModel| -> Result<(f64, f64)> {
        let ds = if val.is_empty() { train } else { val };
        let e = evaluate(m, ds, &obj)?;
        Ok((e.loss, e.metric))
    };

    let mut best = model.clone();
    let mut best_val = select(&model)?.0;
    let mut best_epoch = 0;
    let mut best_train = f64::INFINITY;
    let mut stale = 0;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = grid_batches(&train.samples, &order, cfg.batch_size);
        batches.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for idx in &batches {
            let g = match batch_loss_and_grads(&model, train, idx, &obj, cfg.grad_mode, cfg.chunks) {
                Ok(g) if all_finite(&g) => g,
                Ok(_) => {
                    log::warn!("non-finite loss or gradient in epoch {epoch}; stopping");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) if is_divergence(&e) => {
                    log::warn!("epoch {epoch}: {e}; stopping");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            train_loss += g.loss * idx.len() as f64 / train.len() as f64;
            opt.step(model.params_mut(), &g.grads)?;
            let b = update_bounds(model.bounds(), model.mode(), cfg.lr_tau, g.d_tau_start, g.d_tau_end);
            model.set_bounds(b);
            debug_assert!(model.bounds().is_feasible());
        }
        let (val_loss, val_metric) = match select(&model) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) if is_divergence(&e) => {
                log::warn!("epoch {epoch} validation: {e}; stopping");
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let b = model.bounds();
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} metric {val_metric:.4} tau ({:.4}, {:.4})", b.tau_start, b.tau_end);
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric,
            tau_start: b.tau_start,
            tau_end: b.tau_end,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
        }
        if train_loss < best_train {
            best_train = train_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }
    Ok((
        best,
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_loss: best_val,
            stop_reason: stop,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &NdArray, b: &NdArray, floor: f64) -> f64 {
    let mut d = a.clone();
    if d.axpy(-1.0, b).is_err() {
        return f64::INFINITY;
    }
    d.norm() / a.norm().max(b.norm()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub adjoint_vs_fd: f64,
    pub direct_vs_fd: f64,
    pub adjoint_vs_direct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_error <= tol
    }
}

/// Absolute scale below which gradient norms count as zero in the relative
/// errors of [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare both analytic gradient routes with central finite differences for
/// every parameter group and both bounds.
pub fn grad_check(model: &ExitModel, batch: &Batch, targets: &Targets, obj: &Objective, eps: f64) -> Result<GradCheckReport> {
    let direct = model.loss_and_grads(batch, targets, obj, GradMode::Direct)?;
    let adjoint = model.loss_and_grads(batch, targets, obj, GradMode::Adjoint)?;
    let mut probe = model.clone();
    probe.set_mode(ExitMode::Exit);
    let base = probe.bounds();
    let mut groups = Vec::new();

    for role in Role::ALL {
        let names = model.fields().get(role).param_names();
        let mut fd_all = Vec::new();
        let mut ad_all = Vec::new();
        let mut di_all = Vec::new();
        for name in &names {
            let p = model.params().get(name).unwrap().clone();
            let fd = finite_difference_grad(
                |v: &NdArray| {
                    let mut m = probe.clone();
                    *m.params_mut().get_mut(name).unwrap() = v.clone();
                    Ok(m.loss(batch, targets, obj)?.0)
                },
                &p,
                eps,
            )?;
            fd_all.extend_from_slice(fd.data());
            ad_all.extend_from_slice(adjoint.grads.get(name).unwrap().data());
            di_all.extend_from_slice(direct.grads.get(name).unwrap().data());
        }
        let [fd, ad, di] = [fd_all, ad_all, di_all].map(|v| NdArray::from_vec(v).expect("groups are non-empty"));
        groups.push(GroupCheck {
            group: role.prefix().to_string(),
            adjoint_vs_fd: relative_error(&ad, &fd, GRAD_CHECK_FLOOR),
            direct_vs_fd: relative_error(&di, &fd, GRAD_CHECK_FLOOR),
            adjoint_vs_direct: relative_error(&ad, &di, GRAD_CHECK_FLOOR),
        });
    }

    let loss_at = |s: f64, e: f64| -> Result<f64> {
        let mut m = probe.clone();
        m.set_bounds(IntegrationBounds {
            tau_start: s,
            tau_end: e,
            ..base
        });
        Ok(m.loss(batch, targets, obj)?.0)
    };
    let (s, e) = (base.tau_start, base.tau_end);
    let fd_end = (loss_at(s, e + eps)? - loss_at(s, e - eps)?) / (2.0 * eps);
    let fd_start = if s >= eps {
        (loss_at(s + eps, e)? - loss_at(s - eps, e)?) / (2.0 * eps)
    } else {
        (-3.0 * loss_at(s, e)? + 4.0 * loss_at(s + eps, e)? - loss_at(s + 2.0 * eps, e)?) / (2.0 * eps)
    };
    for (group, fd, ad, di) in [
        ("tau_start", fd_start, adjoint.d_tau_start, direct.d_tau_start),
        ("tau_end", fd_end, adjoint.d_tau_end, direct.d_tau_end),
    ] {
        let [fd, ad, di] = [fd, ad, di].map(NdArray::scalar);
        groups.push(GroupCheck {
            group: group.into(),
            adjoint_vs_fd: relative_error(&ad, &fd, GRAD_CHECK_FLOOR),
            direct_vs_fd: relative_error(&di, &fd, GRAD_CHECK_FLOOR),
            adjoint_vs_direct: relative_error(&ad, &di, GRAD_CHECK_FLOOR),
        });
    }
    let max_error = groups
        .iter()
        .flat_map(|g| [g.adjoint_vs_fd, g.direct_vs_fd, g.adjoint_vs_direct])
        .fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_error })
}
