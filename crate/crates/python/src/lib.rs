use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use exitcde::checkpoint::Checkpoint;
use exitcde::config::{RunConfig, RunOutcome};
use exitcde::data::{generate_synthetic, SyntheticKind};
use exitcde::interp::{Label, TimeSeriesSample};
use exitcde::model::ExitMode;
use exitcde::train::{grad_check, targets_of};
use exitcde::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Input(_) | Error::Data { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration parsed from TOML.
#[pyclass(name = "RunConfig", module = "pyexitcde", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::preset(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        exitcde::config::PRESETS.iter().map(|(n, _)| *n).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn mode(&self) -> String {
        mode_name(self.inner.mode).to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.train.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, n: usize) {
        self.inner.train.max_epochs = n;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    /// Prepare data, train and evaluate. Releases the GIL while running.
    fn run(&self, py: Python<'_>) -> PyResult<PyRunResult> {
        let cfg = self.inner.clone();
        let outcome = py.detach(move || cfg.run()).map_err(py_err)?;
        Ok(PyRunResult { inner: outcome })
    }

    /// Maximum relative error between analytic and finite-difference
    /// gradients on the first `samples` training samples.
    #[pyo3(signature = (eps = 1e-5, samples = 3))]
    fn grad_check(&self, eps: f64, samples: usize) -> PyResult<f64> {
        let splits = self.inner.splits().map_err(py_err)?;
        let cfg = self.inner.resolve(&splits.train).map_err(py_err)?;
        let model = cfg.init_model(splits.terminal().map_err(py_err)?).map_err(py_err)?;
        let grid = &splits.train.samples[0].times;
        let refs: Vec<&TimeSeriesSample> =
            splits.train.samples.iter().filter(|s| &s.times == grid).take(samples.max(1)).collect();
        let targets = targets_of(&refs, &splits.train.task).map_err(py_err)?;
        let batch = model.prepare(&refs).map_err(py_err)?;
        let report = grad_check(&model, &batch, &targets, &cfg.train.objective(), eps).map_err(py_err)?;
        Ok(report.max_error)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, mode={:?})", self.inner.seed, mode_name(self.inner.mode))
    }
}

fn mode_name(m: ExitMode) -> &'static str {
    match m {
        ExitMode::Exit => "exit",
        ExitMode::TerminalExit => "terminal_exit",
        ExitMode::FixedExit => "fixed_exit",
    }
}

/// Result of a training run.
#[pyclass(name = "RunResult", module = "pyexitcde")]
struct PyRunResult {
    inner: RunOutcome,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            ck: Checkpoint::new(
                &self.inner.model,
                self.inner.config.seed,
                self.inner.splits.train.task,
                self.inner.splits.normalizer.clone(),
            ),
        }
    }

    /// Test-split accuracy (classification) or MSE (forecasting).
    #[getter]
    fn test_metric(&self) -> Option<f64> {
        self.inner.test.as_ref().map(|e| e.metric)
    }

    #[getter]
    fn best_val_loss(&self) -> f64 {
        self.inner.report.best_val_loss
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.report.best_epoch
    }

    /// `(epoch, tau_start, tau_end)` per epoch.
    #[getter]
    fn tau_trace(&self) -> Vec<(usize, f64, f64)> {
        self.inner.report.epochs.iter().map(|r| (r.epoch, r.tau_start, r.tau_end)).collect()
    }

    fn report_jsonl(&self) -> String {
        self.inner.report.to_jsonl()
    }

    fn resolved_config(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(py_err)
    }
}

/// A trained model together with its normalization statistics.
#[pyclass(name = "Model", module = "pyexitcde", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    ck: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        ck.model().map_err(py_err)?;
        Ok(PyModel { ck })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ck.save(path).map_err(py_err)
    }

    /// `(tau_start, tau_end, terminal)`.
    #[getter]
    fn bounds(&self) -> (f64, f64, f64) {
        let b = self.ck.bounds;
        (b.tau_start, b.tau_end, b.terminal)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        mode_name(self.ck.mode)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.ck.params.total_size()
    }

    /// Raw model outputs for one sample in data units: logits for
    /// classification, denormalized forecasts otherwise. Missing values
    /// are `None`.
    fn predict(&self, times: Vec<f64>, values: Vec<Vec<Option<f64>>>) -> PyResult<Vec<f64>> {
        let model = self.ck.model().map_err(py_err)?;
        let sample = TimeSeriesSample::new(times, values, None).map_err(py_err)?;
        let sample = match &self.ck.normalizer {
            Some(n) => n.apply(&sample),
            None => sample,
        };
        let mut y = model.predict(&sample).map_err(py_err)?;
        if let Some(n) = &self.ck.normalizer {
            if !self.ck.task.is_classification() {
                n.denormalize_target(&mut y);
            }
        }
        Ok(y)
    }
}

type PySample = (Vec<f64>, Vec<Vec<Option<f64>>>, Option<Vec<f64>>);

/// `n` synthetic samples as `(times, values, label)` tuples, where the
/// label is `[class]` or the flattened forecast target.
#[pyfunction]
#[pyo3(signature = (kind, n, seed = 0))]
fn synthetic(kind: &str, n: usize, seed: u64) -> PyResult<Vec<PySample>> {
    let kind: SyntheticKind = kind.parse().map_err(py_err)?;
    let ds = generate_synthetic(kind, n, seed).map_err(py_err)?;
    Ok(ds
        .samples
        .into_iter()
        .map(|s| {
            let label = s.label.map(|l| match l {
                Label::Class(c) => vec![c as f64],
                Label::Target(t) => t,
            });
            (s.times, s.values, label)
        })
        .collect())
}

#[pymodule]
fn pyexitcde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
