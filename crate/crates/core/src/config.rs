//! Run configuration: one TOML file with top-level `seed`, `mode` and `out`
//! keys and `[data]`, `[model]` and `[train]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    drop_observations, generate_synthetic_with, load_csv, split, CsvSchema, Dataset, Normalizer, SyntheticKind,
    SyntheticOptions,
};
use crate::error::{Error, Result};
use crate::model::{ExitMode, ExitModel, ModelSpec};
use crate::train::{evaluate, fit, Evaluation, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic generator; exclusive with `csv`.
    pub synthetic: Option<SyntheticKind>,
    /// Number of synthetic samples.
    pub samples: usize,
    pub steps: usize,
    pub noise: f64,
    pub horizon: usize,
    pub csv: Option<PathBuf>,
    pub schema: CsvSchema,
    /// Train/validation/test weights, normalized to fractions.
    pub split: [f64; 3],
    pub normalize: bool,
    /// Fraction of value entries marked missing before splitting.
    pub drop_ratio: f64,
    pub drop_whole_rows: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let syn = SyntheticOptions::default();
        DataConfig {
            synthetic: None,
            samples: 300,
            steps: syn.steps,
            noise: syn.noise,
            horizon: syn.horizon,
            csv: None,
            schema: CsvSchema::default(),
            split: [4.0, 1.0, 1.0],
            normalize: true,
            drop_ratio: 0.0,
            drop_whole_rows: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.csv) {
            (Some(_), Some(_)) => return Err(Error::config("data", "set exactly one of `synthetic` and `csv`, not both")),
            (None, None) => return Err(Error::config("data", "set one of `synthetic` or `csv`")),
            (Some(_), None) => {
                if self.samples == 0 {
                    return Err(Error::config("data.samples", "must be positive"));
                }
                if self.steps < 2 {
                    return Err(Error::config("data.steps", "must be at least 2"));
                }
                if !(self.noise >= 0.0 && self.noise.is_finite()) {
                    return Err(Error::config("data.noise", "must be non-negative"));
                }
                if self.horizon == 0 {
                    return Err(Error::config("data.horizon", "must be positive"));
                }
            }
            (None, Some(_)) => {}
        }
        if self.split.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.split[0] <= 0.0 {
            return Err(Error::config("data.split", "weights must be non-negative with a positive training weight"));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::config("data.drop_ratio", format!("must lie in [0, 1), got {}", self.drop_ratio)));
        }
        Ok(())
    }

    fn fractions(&self) -> (f64, f64, f64) {
        let s: f64 = self.split.iter().sum();
        (self.split[0] / s, self.split[1] / s, self.split[2] / s)
    }

    fn synthetic_options(&self) -> SyntheticOptions {
        SyntheticOptions {
            steps: self.steps,
            noise: self.noise,
            horizon: self.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data generation, splitting, dropping, initialization and
    /// shuffling; overrides `train.seed`.
    pub seed: u64,
    pub mode: ExitMode,
    /// Output directory for artifacts.
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: ExitMode::Exit,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Train, validation and test splits after dropping and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalizer: Option<Normalizer>,
}

impl Splits {
    /// Common terminal time of every sample.
    pub fn terminal(&self) -> Result<f64> {
        let mut all = self.train.samples.iter().chain(&self.val.samples).chain(&self.test.samples);
        let t = all.next().ok_or_else(|| Error::Input("no samples".into()))?.terminal_time();
        if all.any(|s| s.terminal_time() != t) {
            return Err(Error::config(
                "data.schema.terminal",
                "samples end at different times; set a common terminal",
            ));
        }
        Ok(t)
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// The resolved configuration, with data-derived fields filled in.
    pub config: RunConfig,
    pub model: ExitModel,
    pub report: TrainReport,
    pub splits: Splits,
    pub test: Option<Evaluation>,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string() + &span_hint(text, e.span())))
    }

    /// Read a config file; a relative `data.csv` path is taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(csv), Some(dir)) = (&cfg.data.csv, path.parent()) {
            if csv.is_relative() {
                cfg.data.csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// A shipped preset by name; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::config("preset", format!("unknown preset {name:?} (one of {})", names.join(", ")))
        })?;
        Self::from_toml_str(text)
    }

    /// Check every section without touching data.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let mut probe = self.model.clone();
        probe.input_channels = probe.input_channels.max(1);
        probe.output_dim = probe.output_dim.max(1);
        probe.build_fields()?;
        Ok(())
    }

    /// The full dataset, after observation dropping.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match (&self.data.synthetic, &self.data.csv) {
            (Some(kind), None) => {
                generate_synthetic_with(*kind, self.data.samples, sub_seed(self.seed, 1), &self.data.synthetic_options())?
            }
            (None, Some(path)) => load_csv(path, &self.data.schema)?,
            _ => return Err(Error::config("data", "set exactly one of `synthetic` and `csv`")),
        };
        if self.data.drop_ratio > 0.0 {
            drop_observations(&ds, self.data.drop_ratio, sub_seed(self.seed, 2), self.data.drop_whole_rows)
        } else {
            Ok(ds)
        }
    }

    /// Split and normalize with training statistics only.
    pub fn splits(&self) -> Result<Splits> {
        let ds = self.load_dataset()?;
        let (train, val, test) = split(&ds, self.data.fractions(), sub_seed(self.seed, 3))?;
        if train.is_empty() {
            return Err(Error::config("data.split", "training split is empty"));
        }
        if !self.data.normalize {
            return Ok(Splits {
                train,
                val,
                test,
                normalizer: None,
            });
        }
        let norm = Normalizer::fit(&train)?;
        Ok(Splits {
            train: train.normalized(&norm),
            val: val.normalized(&norm),
            test: test.normalized(&norm),
            normalizer: Some(norm),
        })
    }

    /// Copy with data-derived dimensions and the run seed filled in.
    pub fn resolve(&self, data: &Dataset) -> Result<RunConfig> {
        let mut out = self.clone();
        let (d, o) = (data.channels(), data.task.output_dim());
        for (field, set, derived) in [
            ("model.input_channels", &mut out.model.input_channels, d),
            ("model.output_dim", &mut out.model.output_dim, o),
        ] {
            if *set == 0 {
                *set = derived;
            } else if *set != derived {
                return Err(Error::config(field, format!("is {set} but the data implies {derived}")));
            }
        }
        out.train.seed = sub_seed(self.seed, 5);
        out.validate()?;
        Ok(out)
    }

    /// A freshly initialized model for resolved dimensions and terminal `t`.
    pub fn init_model(&self, terminal: f64) -> Result<ExitModel> {
        ExitModel::new(self.model.clone(), terminal, self.mode, sub_seed(self.seed, 4))
    }

    /// Validate, prepare data, train and evaluate on the test split.
    pub fn run(&self) -> Result<RunOutcome> {
        self.validate()?;
        let splits = self.splits()?;
        let config = self.resolve(&splits.train)?;
        let model = config.init_model(splits.terminal()?)?;
        let (model, report) = fit(model, &splits.train, &splits.val, &config.train)?;
        let test = if splits.test.is_empty() {
            None
        } else {
            Some(evaluate(&model, &splits.test, &config.train.objective())?)
        };
        Ok(RunOutcome {
            config,
            model,
            report,
            splits,
            test,
        })
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

/// Shipped configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("two_freq_sine", include_str!("../../../configs/two_freq_sine.toml")),
    ("ar_forecasting", include_str!("../../../configs/ar_forecasting.toml")),
    ("toy_gradcheck", include_str!("../../../configs/toy_gradcheck.toml")),
    ("character_trajectories", include_str!("../../../configs/character_trajectories.toml")),
    ("google_stock", include_str!("../../../configs/google_stock.toml")),
];
