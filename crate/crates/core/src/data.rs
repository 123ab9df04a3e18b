//! Datasets: CSV ingest, normalization, observation dropping, splitting and
//! synthetic generators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{Label, TimeSeriesSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Forecasting { horizon: usize, channels: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Forecasting { horizon, channels } => horizon * channels,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Standard deviation, or 1 for a constant channel.
    pub scale: Vec<f64>,
    /// Statistics of the forecasting target channels; empty for classification.
    #[serde(default)]
    pub target_mean: Vec<f64>,
    #[serde(default)]
    pub target_scale: Vec<f64>,
}

struct Moments {
    sum: Vec<f64>,
    n: Vec<usize>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            sum: vec![0.0; d],
            n: vec![0; d],
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.n).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect()
    }

    /// Square root of the accumulated mean, or 1 when it vanishes.
    fn scale(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.n)
            .map(|(s, &n)| {
                let sd = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn channel_stats<'a>(d: usize, entries: impl Fn(&mut dyn FnMut(usize, f64)) + 'a) -> (Vec<f64>, Vec<f64>) {
    let mut first = Moments::new(d);
    entries(&mut |c, v| {
        first.sum[c] += v;
        first.n[c] += 1;
    });
    let mean = first.mean();
    let mut second = Moments::new(d);
    entries(&mut |c, v| {
        second.sum[c] += (v - mean[c]).powi(2);
        second.n[c] += 1;
    });
    (mean, second.scale())
}

impl Normalizer {
    /// Statistics over every observed entry of `ds`, plus per-channel target
    /// statistics for forecasting.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Input("cannot fit normalization on an empty split".into()));
        }
        let samples = &ds.samples;
        let (mean, scale) = channel_stats(ds.channels(), |put| {
            for s in samples {
                for row in &s.values {
                    for (c, v) in row.iter().enumerate() {
                        if let Some(v) = v {
                            put(c, *v);
                        }
                    }
                }
            }
        });
        let (target_mean, target_scale) = match ds.task {
            Task::Classification { .. } => (Vec::new(), Vec::new()),
            Task::Forecasting { channels, .. } => channel_stats(channels, |put| {
                for s in samples {
                    if let Some(Label::Target(t)) = &s.label {
                        for (i, v) in t.iter().enumerate() {
                            put(i % channels, *v);
                        }
                    }
                }
            }),
        };
        Ok(Normalizer {
            mean,
            scale,
            target_mean,
            target_scale,
        })
    }

    /// Normalize values and forecasting targets; class labels are untouched.
    pub fn apply(&self, sample: &TimeSeriesSample) -> TimeSeriesSample {
        let mut out = sample.clone();
        for row in &mut out.values {
            for (c, v) in row.iter_mut().enumerate() {
                if let Some(v) = v {
                    *v = (*v - self.mean[c]) / self.scale[c];
                }
            }
        }
        if let Some(Label::Target(t)) = &mut out.label {
            let d = self.target_mean.len();
            if d > 0 {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = (*v - self.target_mean[i % d]) / self.target_scale[i % d];
                }
            }
        }
        out
    }

    /// Map a flattened `horizon x channels` prediction back to data units.
    pub fn denormalize_target(&self, values: &mut [f64]) {
        let d = self.target_mean.len();
        if d == 0 {
            return;
        }
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.target_scale[i % d] + self.target_mean[i % d];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TimeSeriesSample>,
    pub task: Task,
    pub normalizer: Option<Normalizer>,
}

impl Dataset {
    pub fn new(samples: Vec<TimeSeriesSample>, task: Task) -> Result<Self> {
        let ds = Dataset {
            samples,
            task,
            normalizer: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, TimeSeriesSample::channels)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        for (i, s) in self.samples.iter().enumerate() {
            s.validate().map_err(|e| Error::Input(format!("sample {i}: {e}")))?;
            if s.channels() != d {
                return Err(Error::Input(format!("sample {i} has {} channels, expected {d}", s.channels())));
            }
            match (&self.task, &s.label) {
                (Task::Classification { classes }, Some(Label::Class(c))) if c < classes => {}
                (Task::Forecasting { horizon, channels }, Some(Label::Target(t))) if t.len() == horizon * channels => {}
                (_, label) => {
                    return Err(Error::Input(format!("sample {i} label {label:?} does not fit task {:?}", self.task)))
                }
            }
        }
        Ok(())
    }

    /// Copy with the normalizer applied to every sample.
    pub fn normalized(&self, norm: &Normalizer) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(|s| norm.apply(s)).collect(),
            task: self.task,
            normalizer: Some(norm.clone()),
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            task: self.task,
            normalizer: self.normalizer.clone(),
        }
    }
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub id_column: String,
    pub time_column: String,
    /// Value columns; empty means every column that is not id, time or label.
    pub value_columns: Vec<String>,
    /// Class label column (classification).
    pub label_column: Option<String>,
    /// Number of classes; inferred from the labels when absent.
    pub classes: Option<usize>,
    /// Forecasting: the last `horizon` rows of each sample form the target.
    pub horizon: Option<usize>,
    /// Forecasting target columns, a subset of the value columns; empty means all.
    pub target_columns: Vec<String>,
    /// Terminal time after rescaling; defaults to the number of input rows − 1.
    pub terminal: Option<f64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id_column: "sample_id".into(),
            time_column: "t".into(),
            value_columns: Vec::new(),
            label_column: Some("label".into()),
            classes: None,
            horizon: None,
            target_columns: Vec::new(),
            terminal: None,
        }
    }
}

fn parse_cell(cell: &str, line: usize, col: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| Error::Data {
        line,
        msg: format!("cannot parse {cell:?} in column {col}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data {
            line,
            msg: format!("non-finite value in column {col}"),
        });
    }
    Ok(Some(v))
}

/// Rescale times so they run from 0 to `terminal`.
fn rescale(times: &[f64], terminal: f64) -> Vec<f64> {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    if t0 == 0.0 && span == terminal {
        return times.to_vec();
    }
    let k = terminal / span;
    let mut out: Vec<f64> = times.iter().map(|t| (t - t0) * k).collect();
    *out.last_mut().unwrap() = terminal;
    out
}

struct RawSample {
    line: usize,
    times: Vec<f64>,
    values: Vec<Vec<Option<f64>>>,
    label: Option<usize>,
}

fn read_samples(path: &Path, schema: &CsvSchema, labelled: bool) -> Result<(Vec<String>, Vec<TimeSeriesSample>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Data { line: 1, msg: e.to_string() })?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Data {
            line: 1,
            msg: format!("missing column {name:?}"),
        })
    };
    let id_col = find(&schema.id_column)?;
    let t_col = find(&schema.time_column)?;
    let horizon = schema.horizon.filter(|_| labelled);
    let label_col = match (&schema.label_column, schema.horizon) {
        _ if !labelled => None,
        (_, Some(_)) => None,
        (Some(l), None) => Some(find(l)?),
        (None, None) => {
            return Err(Error::config("data.schema", "needs a label column or a forecasting horizon"));
        }
    };
    let value_cols: Vec<(usize, String)> = if schema.value_columns.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != id_col && i != t_col && Some(i) != label_col)
            .filter(|(_, h)| schema.label_column.as_deref() != Some(*h))
            .map(|(i, h)| (i, h.to_string()))
            .collect()
    } else {
        schema.value_columns.iter().map(|c| Ok((find(c)?, c.clone()))).collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(Error::Data {
            line: 1,
            msg: "no value columns".into(),
        });
    }

    let target_pos: Vec<usize> = if schema.target_columns.is_empty() {
        (0..value_cols.len()).collect()
    } else {
        schema
            .target_columns
            .iter()
            .map(|c| {
                value_cols.iter().position(|(_, name)| name == c).ok_or_else(|| Error::Data {
                    line: 1,
                    msg: format!("target column {c:?} is not a value column"),
                })
            })
            .collect::<Result<_>>()?
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, RawSample> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data { line, msg: e.to_string() })?;
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let t = parse_cell(rec.get(t_col).unwrap_or(""), line, &schema.time_column)?.ok_or_else(|| Error::Data {
            line,
            msg: "missing time".into(),
        })?;
        let values = value_cols
            .iter()
            .map(|(c, name)| parse_cell(rec.get(*c).unwrap_or(""), line, name))
            .collect::<Result<Vec<_>>>()?;
        let label = match label_col {
            Some(c) => {
                let cell = rec.get(c).unwrap_or("").trim();
                if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<usize>().map_err(|_| Error::Data {
                        line,
                        msg: format!("class label {cell:?} is not a non-negative integer"),
                    })?)
                }
            }
            None => None,
        };
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawSample {
                line,
                times: Vec::new(),
                values: Vec::new(),
                label: None,
            }
        });
        if let Some(&prev) = entry.times.last() {
            if t <= prev {
                return Err(Error::Data {
                    line,
                    msg: format!("time {t} does not increase within sample {id:?} (previous {prev})"),
                });
            }
        }
        match (entry.label, label) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Data {
                    line,
                    msg: format!("sample {id:?} has conflicting labels {a} and {b}"),
                })
            }
            (None, Some(b)) => entry.label = Some(b),
            _ => {}
        }
        entry.times.push(t);
        entry.values.push(values);
    }

    let mut samples = Vec::with_capacity(order.len());
    for id in &order {
        let raw = groups.remove(id).unwrap();
        let (times, values, label) = match horizon {
            Some(h) => {
                let n = raw.times.len();
                if n < h + 2 {
                    return Err(Error::Data {
                        line: raw.line,
                        msg: format!("sample {id:?} has {n} rows, needs at least horizon + 2 = {}", h + 2),
                    });
                }
                let mut target = Vec::with_capacity(h * target_pos.len());
                for row in &raw.values[n - h..] {
                    for &p in &target_pos {
                        target.push(row[p].ok_or_else(|| Error::Data {
                            line: raw.line,
                            msg: format!("sample {id:?} has a missing forecasting target"),
                        })?);
                    }
                }
                (raw.times[..n - h].to_vec(), raw.values[..n - h].to_vec(), Some(Label::Target(target)))
            }
            None if !labelled => (raw.times, raw.values, None),
            None => {
                let c = raw.label.ok_or_else(|| Error::Data {
                    line: raw.line,
                    msg: format!("sample {id:?} has no class label"),
                })?;
                (raw.times, raw.values, Some(Label::Class(c)))
            }
        };
        if times.len() < 2 {
            return Err(Error::Data {
                line: raw.line,
                msg: format!("sample {id:?} needs at least two time points"),
            });
        }
        let terminal = schema.terminal.unwrap_or((times.len() - 1) as f64);
        let sample = TimeSeriesSample::new(rescale(&times, terminal), values, label)
            .map_err(|e| Error::Data { line: raw.line, msg: e.to_string() })?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Data {
            line: 1,
            msg: "no samples".into(),
        });
    }
    Ok((order, samples, target_pos.len()))
}

/// Read a dataset from CSV with a header row. Rows sharing a `sample_id`
/// form one sample, in file order; empty cells are missing values.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let (_, samples, targets) = read_samples(path.as_ref(), schema, true)?;
    let task = match schema.horizon {
        Some(horizon) => Task::Forecasting {
            horizon,
            channels: targets,
        },
        None => {
            let max = samples.iter().filter_map(TimeSeriesSample::class).max().unwrap();
            let classes = schema.classes.unwrap_or(max + 1);
            Task::Classification { classes }
        }
    };
    Dataset::new(samples, task)
}

/// Read unlabelled inputs for prediction: label columns are ignored and,
/// for forecasting schemas, every row is an input row. Returns sample ids
/// in file order.
pub fn load_unlabeled_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Vec<String>, Vec<TimeSeriesSample>)> {
    let (ids, samples, _) = read_samples(path.as_ref(), schema, false)?;
    Ok((ids, samples))
}

/// Write a dataset in the layout [`load_csv`] reads with the default schema
/// (plus `horizon` for forecasting). Target rows follow each sample's input
/// rows at unit time spacing and fill the leading value columns.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.to_string()))?;
    let d = ds.channels();
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|c| format!("c{c}")));
    let classification = ds.task.is_classification();
    if classification {
        header.push("label".into());
    }
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    for (i, s) in ds.samples.iter().enumerate() {
        let id = i.to_string();
        let label = s.class().map(|c| c.to_string()).unwrap_or_default();
        for (t, row) in s.times.iter().zip(&s.values) {
            let mut rec = vec![id.clone(), format!("{t:?}")];
            rec.extend(row.iter().map(|&v| cell(v)));
            if classification {
                rec.push(label.clone());
            }
            w.write_record(&rec).map_err(io)?;
        }
        if let Some(Label::Target(target)) = &s.label {
            let t_end = s.terminal_time();
            let tc = match ds.task {
                Task::Forecasting { channels, .. } => channels,
                Task::Classification { .. } => d,
            };
            for (k, chunk) in target.chunks(tc).enumerate() {
                let mut rec = vec![id.clone(), format!("{:?}", t_end + (k + 1) as f64)];
                rec.extend(chunk.iter().map(|&v| cell(Some(v))));
                rec.extend((tc..d).map(|_| String::new()));
                w.write_record(&rec).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Mark a random fraction of each sample's entries as missing. Entries in
/// the first and last rows are never dropped. With `whole_rows`, interior
/// rows are removed instead.
pub fn drop_observations(ds: &Dataset, ratio: f64, seed: u64, whole_rows: bool) -> Result<Dataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("data.drop_ratio", format!("must lie in [0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for (si, s) in out.samples.iter_mut().enumerate() {
        let n = s.len();
        if whole_rows {
            let k = (ratio * n as f64).floor() as usize;
            if k > n - 2 {
                return Err(Error::Input(format!("sample {si}: cannot drop {k} of {n} rows keeping both endpoints")));
            }
            let mut drop = rand::seq::index::sample(&mut rng, n - 2, k).into_vec();
            drop.sort_unstable();
            let mut keep = vec![true; n];
            for i in drop {
                keep[i + 1] = false;
            }
            let mut idx = 0;
            s.times.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });
            let mut idx = 0;
            s.values.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });
        } else {
            let d = s.channels();
            let observed: usize = (0..d).map(|c| s.observed_count(c)).sum();
            let k = (ratio * observed as f64).floor() as usize;
            let candidates: Vec<(usize, usize)> = (1..n - 1)
                .flat_map(|i| (0..d).map(move |c| (i, c)))
                .filter(|&(i, c)| s.values[i][c].is_some())
                .collect();
            if k > candidates.len() {
                return Err(Error::Input(format!(
                    "sample {si}: cannot drop {k} entries, only {} interior entries are observed",
                    candidates.len()
                )));
            }
            for j in rand::seq::index::sample(&mut rng, candidates.len(), k) {
                let (i, c) = candidates[j];
                s.values[i][c] = None;
            }
        }
        for c in 0..s.channels() {
            if s.observed_count(c) < 2 {
                return Err(Error::SparseChannel {
                    channel: c,
                    observed: s.observed_count(c),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoFreqSineClassification,
    DampedSpiralClassification,
    ArForecasting,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_freq_sine_classification" | "two_freq_sine" => Ok(SyntheticKind::TwoFreqSineClassification),
            "damped_spiral_classification" | "damped_spiral" => Ok(SyntheticKind::DampedSpiralClassification),
            "ar_forecasting" => Ok(SyntheticKind::ArForecasting),
            _ => Err(Error::config("data.synthetic", format!("unknown synthetic kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    /// Input time steps per sample.
    pub steps: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Forecasting horizon.
    pub horizon: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            steps: 50,
            noise: 0.1,
            horizon: 10,
        }
    }
}

pub fn generate_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_with(kind, n, seed, &SyntheticOptions::default())
}

pub fn generate_synthetic_with(kind: SyntheticKind, n: usize, seed: u64, opts: &SyntheticOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Input("synthetic dataset needs n > 0".into()));
    }
    if opts.steps < 2 || !(opts.noise >= 0.0) {
        return Err(Error::config("data.synthetic", "needs steps >= 2 and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise).map_err(|e| Error::config("data.noise", e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).unwrap();
    let steps = opts.steps;
    let big_t = (steps - 1) as f64;
    let times: Vec<f64> = (0..steps).map(|i| i as f64).collect();
    let mut samples = Vec::with_capacity(n);
    let task = match kind {
        SyntheticKind::TwoFreqSineClassification => {
            for i in 0..n {
                let class = i % 2;
                let freq = (class + 1) as f64;
                let rows = times
                    .iter()
                    .map(|&t| vec![(2.0 * PI * freq * t / big_t).sin() + noise.sample(&mut rng)])
                    .collect();
                samples.push(TimeSeriesSample::dense(times.clone(), rows, Some(Label::Class(class)))?);
            }
            Task::Classification { classes: 2 }
        }
        SyntheticKind::DampedSpiralClassification => {
            for i in 0..n {
                let class = i % 2;
                let decay = if class == 0 { 0.5 } else { 2.5 };
                let phase = rand::Rng::random_range(&mut rng, 0.0..2.0 * PI);
                let rows = times
                    .iter()
                    .map(|&t| {
                        let u = t / big_t;
                        let r = (-decay * u).exp();
                        let a = 4.0 * PI * u + phase;
                        vec![r * a.cos() + noise.sample(&mut rng), r * a.sin() + noise.sample(&mut rng)]
                    })
                    .collect();
                samples.push(TimeSeriesSample::dense(times.clone(), rows, Some(Label::Class(class)))?);
            }
            Task::Classification { classes: 2 }
        }
        SyntheticKind::ArForecasting => {
            // x_t = a1·x_{t-1} + a2·x_{t-2} + noise, per channel
            let coeffs = [(1.68, -0.94), (1.8, -0.9)];
            let horizon = opts.horizon;
            let burn_in = 20;
            for _ in 0..n {
                let total = burn_in + steps + horizon;
                let mut series = vec![[0.0; 2]; total];
                series[0] = [unit.sample(&mut rng), unit.sample(&mut rng)];
                series[1] = [unit.sample(&mut rng), unit.sample(&mut rng)];
                for t in 2..total {
                    for (c, &(a1, a2)) in coeffs.iter().enumerate() {
                        series[t][c] = a1 * series[t - 1][c] + a2 * series[t - 2][c] + noise.sample(&mut rng);
                    }
                }
                let rows = series[burn_in..burn_in + steps].iter().map(|r| r.to_vec()).collect();
                let target = series[burn_in + steps..].iter().flat_map(|r| r.iter().copied()).collect();
                samples.push(TimeSeriesSample::dense(times.clone(), rows, Some(Label::Target(target)))?);
            }
            Task::Forecasting { horizon, channels: 2 }
        }
    };
    Dataset::new(samples, task)
}

/// Split into train, validation and test sets, stratified by class for
/// classification. Per class, `round(f·n)` samples go to train and to
/// validation and the rest to test.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config("data.split", format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        strata.entry(s.class().unwrap_or(0)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut idx) in strata {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_tr = ((a * n as f64).round() as usize).min(n);
        let n_va = ((b * n as f64).round() as usize).min(n - n_tr);
        if ds.task.is_classification() {
            for (name, f, count) in [("train", a, n_tr), ("validation", b, n_va), ("test", c, n - n_tr - n_va)] {
                if f > 0.0 && count == 0 {
                    log::warn!("class {class} is absent from the {name} split");
                }
            }
        }
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    Ok((ds.subset(&tr), ds.subset(&va), ds.subset(&te)))
}
