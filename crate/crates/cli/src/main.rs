use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use exitcde::checkpoint::Checkpoint;
use exitcde::config::{RunConfig, Splits};
use exitcde::data::{load_unlabeled_csv, Dataset, Task};
use exitcde::interp::TimeSeriesSample;
use exitcde::model::ExitMode;
use exitcde::train::{evaluate, grad_check, targets_of, Evaluation, TrainReport};
use exitcde::Error;

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "exitcde", version, about = "Train and evaluate EXIT neural CDE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, report, τ trace and resolved config.
    Train(Common),
    /// Print the test-split metric of a trained checkpoint.
    Eval(WithCheckpoint),
    /// Write predictions for an unlabelled CSV.
    Predict {
        #[command(flatten)]
        run: WithCheckpoint,
        /// Input CSV in the layout of the configured schema, labels optional.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Number of training samples in the checked batch.
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Train once per mode and print a comparison table.
    Ablate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Run config (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset name instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// exit, terminal_exit or fixed_exit.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    drop_ratio: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; defaults to checkpoint.json in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Exit status 1: the configuration or invocation is invalid.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

fn lib_err(e: Error) -> anyhow::Error {
    match e {
        Error::Config { .. } => config_err(e),
        e => e.into(),
    }
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path).map_err(lib_err)?,
            (None, Some(name)) => RunConfig::preset(name).map_err(lib_err)?,
            (None, None) => return Err(config_err("one of --config or --preset is required")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse().map_err(lib_err)?;
        }
        if let Some(r) = self.drop_ratio {
            cfg.data.drop_ratio = r;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate().map_err(lib_err)?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn tau_trace(report: &TrainReport) -> String {
    let mut s = String::from("epoch,tau_start,tau_end\n");
    for r in &report.epochs {
        let _ = writeln!(s, "{},{:?},{:?}", r.epoch, r.tau_start, r.tau_end);
    }
    s
}

fn metric_line(task: &Task, e: &Evaluation) -> String {
    match task {
        Task::Classification { .. } => match e.auroc {
            Some(a) => format!("accuracy={:.6} auroc={:.6} loss={:.6}", e.metric, a, e.task_loss),
            None => format!("accuracy={:.6} loss={:.6}", e.metric, e.task_loss),
        },
        Task::Forecasting { .. } => format!("mse={:.6}", e.metric),
    }
}

fn train(common: &Common) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let outcome = cfg.run().map_err(lib_err)?;
    let out = &outcome.config.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ck = Checkpoint::new(
        &outcome.model,
        outcome.config.seed,
        outcome.splits.train.task,
        outcome.splits.normalizer.clone(),
    );
    ck.save(out.join("checkpoint.json"))?;
    write(&out.join("report.jsonl"), &outcome.report.to_jsonl())?;
    write(&out.join("tau_trace.csv"), &tau_trace(&outcome.report))?;
    write(&out.join("resolved.toml"), &outcome.config.to_toml()?)?;
    let b = outcome.model.bounds();
    println!(
        "trained {} epochs ({:?}), best epoch {} val loss {:.6}, tau ({:.4}, {:.4})",
        outcome.report.epochs.len(),
        outcome.report.stop_reason,
        outcome.report.best_epoch,
        outcome.report.best_val_loss,
        b.tau_start,
        b.tau_end
    );
    if let Some(e) = &outcome.test {
        println!("test {}", metric_line(&outcome.splits.test.task, e));
    }
    Ok(())
}

fn load_checkpoint(run: &WithCheckpoint, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = run.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.json"));
    if !path.exists() {
        return Err(anyhow!("checkpoint {} not found; run `train` first", path.display()));
    }
    Ok(Checkpoint::load(&path)?)
}

/// Splits normalized with the checkpoint's statistics.
fn checkpoint_splits(cfg: &RunConfig, ck: &Checkpoint) -> anyhow::Result<Splits> {
    let mut raw = cfg.clone();
    raw.data.normalize = false;
    let s = raw.splits().map_err(lib_err)?;
    let norm = |d: Dataset| match &ck.normalizer {
        Some(n) => d.normalized(n),
        None => d,
    };
    Ok(Splits {
        train: norm(s.train),
        val: norm(s.val),
        test: norm(s.test),
        normalizer: ck.normalizer.clone(),
    })
}

fn eval(run: &WithCheckpoint) -> anyhow::Result<()> {
    let mut cfg = run.common.load()?;
    let ck = load_checkpoint(run, &cfg)?;
    if run.common.seed.is_none() {
        cfg.seed = ck.seed;
    }
    let model = ck.model()?;
    let splits = checkpoint_splits(&cfg, &ck)?;
    let ds = if splits.test.is_empty() { &splits.val } else { &splits.test };
    if ds.is_empty() {
        return Err(config_err("data.split: no test or validation samples to evaluate"));
    }
    let e = evaluate(&model, ds, &cfg.train.objective())?;
    println!("{}", metric_line(&ds.task, &e));
    Ok(())
}

fn predict(run: &WithCheckpoint, input: &Path) -> anyhow::Result<()> {
    let cfg = run.common.load()?;
    let ck = load_checkpoint(run, &cfg)?;
    let model = ck.model()?;
    let (ids, samples) = load_unlabeled_csv(input, &cfg.data.schema)?;
    let samples: Vec<TimeSeriesSample> = match &ck.normalizer {
        Some(n) => samples.iter().map(|s| n.apply(s)).collect(),
        None => samples,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let classification = ck.task.is_classification();
    let width = ck.task.output_dim();
    let mut header = vec!["sample_id".to_string()];
    if classification {
        header.push("class".into());
        header.extend((0..width).map(|k| format!("logit_{k}")));
    } else {
        header.extend((0..width).map(|k| format!("y_{k}")));
    }
    w.write_record(&header)?;
    for (id, s) in ids.iter().zip(&samples) {
        let mut y = model.predict(s)?;
        let mut rec = vec![id.clone()];
        if classification {
            let best = (0..y.len()).fold(0, |b, k| if y[k] > y[b] { k } else { b });
            rec.push(best.to_string());
        } else if let Some(n) = &ck.normalizer {
            n.denormalize_target(&mut y);
        }
        rec.extend(y.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("predictions.csv");
    write(&path, &text)?;
    println!("wrote {} predictions to {}", ids.len(), path.display());
    Ok(())
}

fn gradcheck(common: &Common, eps: f64, n: usize) -> anyhow::Result<bool> {
    if !(eps > 0.0) || n == 0 {
        return Err(config_err("--eps and --samples must be positive"));
    }
    let cfg = common.load()?;
    let splits = cfg.splits().map_err(lib_err)?;
    let cfg = cfg.resolve(&splits.train).map_err(lib_err)?;
    let model = cfg.init_model(splits.terminal()?)?;
    let grid = &splits.train.samples[0].times;
    let refs: Vec<&TimeSeriesSample> = splits.train.samples.iter().filter(|s| &s.times == grid).take(n).collect();
    let targets = targets_of(&refs, &splits.train.task)?;
    let batch = model.prepare(&refs)?;
    let report = grad_check(&model, &batch, &targets, &cfg.train.objective(), eps)?;
    println!("{:<12} {:>14} {:>14} {:>14}", "group", "adjoint-fd", "direct-fd", "adjoint-direct");
    for g in &report.groups {
        println!("{:<12} {:>14.3e} {:>14.3e} {:>14.3e}", g.group, g.adjoint_vs_fd, g.direct_vs_fd, g.adjoint_vs_direct);
    }
    let pass = report.passed(GRAD_TOL);
    println!(
        "max relative error {:.3e} (tolerance {GRAD_TOL:e}): {}",
        report.max_error,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn ablate(common: &Common) -> anyhow::Result<()> {
    let base = common.load()?;
    let mut table = String::from("mode,best_val_loss,test_metric,tau_start,tau_end\n");
    println!("{:<14} {:>14} {:>12} {:>10} {:>10}", "mode", "best_val_loss", "test_metric", "tau_start", "tau_end");
    for mode in ExitMode::ALL {
        let cfg = RunConfig { mode, ..base.clone() };
        let o = cfg.run().map_err(lib_err)?;
        let b = o.model.bounds();
        let metric = o.test.as_ref().map_or(f64::NAN, |e| e.metric);
        println!(
            "{:<14} {:>14.6} {:>12.6} {:>10.4} {:>10.4}",
            mode.label(),
            o.report.best_val_loss,
            metric,
            b.tau_start,
            b.tau_end
        );
        let _ = writeln!(
            table,
            "{},{:?},{:?},{:?},{:?}",
            mode.label(),
            o.report.best_val_loss,
            metric,
            b.tau_start,
            b.tau_end
        );
    }
    std::fs::create_dir_all(&base.out)?;
    write(&base.out.join("ablation.csv"), &table)?;
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EXITCDE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(format!("EXITCDE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Train(c) => train(c)?,
        Command::Eval(r) => eval(r)?,
        Command::Predict { run, input } => predict(run, input)?,
        Command::Gradcheck { common, eps, samples } => return gradcheck(common, *eps, *samples),
        Command::Ablate(c) => ablate(c)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
