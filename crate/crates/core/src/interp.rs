//! Natural cubic spline paths built from (possibly incomplete) samples.
//!
//! Each channel is splined over its own observed knots. An optional time
//! channel `t -> t` is appended, and optionally one cumulative
//! observation-count channel per input channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target attached to a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Flattened `horizon x channels` forecasting target.
    Target(Vec<f64>),
}

/// One irregularly observed multivariate series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub times: Vec<f64>,
    /// `values[i][c]` is channel `c` at `times[i]`; `None` marks a missing entry.
    pub values: Vec<Vec<Option<f64>>>,
    pub label: Option<Label>,
}

impl TimeSeriesSample {
    pub fn new(times: Vec<f64>, values: Vec<Vec<Option<f64>>>, label: Option<Label>) -> Result<Self> {
        let s = TimeSeriesSample { times, values, label };
        s.validate()?;
        Ok(s)
    }

    /// Fully observed sample from dense rows.
    pub fn dense(times: Vec<f64>, rows: Vec<Vec<f64>>, label: Option<Label>) -> Result<Self> {
        let values = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(times, values, label)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn terminal_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Some(Label::Class(c)) => Some(c),
            _ => None,
        }
    }

    pub fn observed_count(&self, channel: usize) -> usize {
        self.values.iter().filter(|r| r[channel].is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Input(format!(
                "{} times but {} value rows",
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.len() < 2 {
            return Err(Error::Input("a sample needs at least two time points".into()));
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Input(format!(
                "times must be strictly increasing: t[{i}] = {} followed by {}",
                self.times[i],
                self.times[i + 1]
            )));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Input("non-finite time".into()));
        }
        let d = self.channels();
        if d == 0 || self.values.iter().any(|r| r.len() != d) {
            return Err(Error::Input("value rows must share a positive channel count".into()));
        }
        Ok(())
    }
}

/// Behaviour for queries outside the knot range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfDomain {
    #[default]
    Error,
    Clamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineOptions {
    pub time_channel: bool,
    pub observation_intensity: bool,
    pub out_of_domain: OutOfDomain,
}

impl Default for SplineOptions {
    fn default() -> Self {
        SplineOptions {
            time_channel: true,
            observation_intensity: false,
            out_of_domain: OutOfDomain::Error,
        }
    }
}

/// Natural cubic spline of one channel. Piece `i` on `[knots[i], knots[i+1]]`
/// is `a + b·u + c·u² + d·u³` with `u = t - knots[i]`. Outside the knots the
/// spline continues linearly, which keeps it C² since X″ = 0 at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    coeffs: Vec<[f64; 4]>,
}

impl CubicSpline {
    pub fn natural(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n {
            return Err(Error::Input(format!(
                "spline needs >= 2 knots with matching values, got {} and {}",
                n,
                values.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<f64> = (0..n - 1).map(|i| (values[i + 1] - values[i]) / h[i]).collect();

        // Second derivatives at knots; natural ends fix m[0] = m[n-1] = 0 and
        // the interior satisfies a symmetric tridiagonal system (Thomas sweep).
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag: Vec<f64> = (0..k).map(|i| 2.0 * (h[i] + h[i + 1])).collect();
            let mut rhs: Vec<f64> = (0..k).map(|i| 6.0 * (slope[i + 1] - slope[i])).collect();
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }

        let coeffs = (0..n - 1)
            .map(|i| {
                [
                    values[i],
                    slope[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
                    m[i] / 2.0,
                    (m[i + 1] - m[i]) / (6.0 * h[i]),
                ]
            })
            .collect();
        Ok(CubicSpline {
            knots: knots.to_vec(),
            coeffs,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn pieces(&self) -> usize {
        self.coeffs.len()
    }

    fn locate(&self, t: f64) -> usize {
        let i = self.knots.partition_point(|&k| k <= t);
        i.saturating_sub(1).min(self.coeffs.len() - 1)
    }

    /// Value, first and second derivative of piece `i` at `t`, without
    /// the linear continuation. Useful for one-sided limits at knots.
    pub fn piece_eval(&self, i: usize, t: f64) -> [f64; 3] {
        let [a, b, c, d] = self.coeffs[i];
        let u = t - self.knots[i];
        [
            a + u * (b + u * (c + u * d)),
            b + u * (2.0 * c + 3.0 * d * u),
            2.0 * c + 6.0 * d * u,
        ]
    }

    /// Value, first and second derivative at `t`.
    pub fn eval_all(&self, t: f64) -> [f64; 3] {
        let lo = self.knots[0];
        let hi = *self.knots.last().unwrap();
        if t < lo {
            let [y, dy, _] = self.piece_eval(0, lo);
            [y + dy * (t - lo), dy, 0.0]
        } else if t > hi {
            let last = self.coeffs.len() - 1;
            let [y, dy, _] = self.piece_eval(last, hi);
            [y + dy * (t - hi), dy, 0.0]
        } else {
            self.piece_eval(self.locate(t), t)
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_all(t)[0]
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.eval_all(t)[1]
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.eval_all(t)[2]
    }
}

/// Continuous path `X(t)` over a sample's time range.
#[derive(Clone, Debug, PartialEq)]
pub struct SplinePath {
    channels: Vec<CubicSpline>,
    time_channel: bool,
    knots: Vec<f64>,
    out_of_domain: OutOfDomain,
}

impl SplinePath {
    /// Number of coordinates of `X(t)`, including appended channels.
    pub fn dim(&self) -> usize {
        self.channels.len() + usize::from(self.time_channel)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// The sample's full time grid (union of all channel knots).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn channel(&self, c: usize) -> &CubicSpline {
        &self.channels[c]
    }

    pub fn has_time_channel(&self) -> bool {
        self.time_channel
    }

    pub fn with_out_of_domain(mut self, policy: OutOfDomain) -> Self {
        self.out_of_domain = policy;
        self
    }

    fn resolve(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        if (lo..=hi).contains(&t) {
            return Ok(t);
        }
        match self.out_of_domain {
            OutOfDomain::Clamp if !t.is_nan() => Ok(t.clamp(lo, hi)),
            _ => Err(Error::Domain { t, lo, hi }),
        }
    }

    fn collect(&self, t: f64, order: usize) -> Result<Vec<f64>> {
        let t = self.resolve(t)?;
        let mut out: Vec<f64> = self.channels.iter().map(|s| s.eval_all(t)[order]).collect();
        if self.time_channel {
            out.push(match order {
                0 => t,
                1 => 1.0,
                _ => 0.0,
            });
        }
        Ok(out)
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.collect(t, 0)
    }

    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.collect(t, 1)
    }

    pub fn second_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.collect(t, 2)
    }

    /// `X(t)` with `t` clamped into the domain, regardless of policy.
    pub fn eval_clamped(&self, t: f64) -> Vec<f64> {
        let (lo, hi) = self.domain();
        self.clone()
            .with_out_of_domain(OutOfDomain::Clamp)
            .collect(t.clamp(lo, hi), 0)
            .expect("clamped query is in domain")
    }
}

/// Build the interpolated path of a sample.
pub fn fit_spline(sample: &TimeSeriesSample, opts: &SplineOptions) -> Result<SplinePath> {
    sample.validate()?;
    let d = sample.channels();
    let mut channels = Vec::with_capacity(d * if opts.observation_intensity { 2 } else { 1 } );
    for c in 0..d {
        let (knots, vals): (Vec<f64>, Vec<f64>) = sample
            .times
            .iter()
            .zip(&sample.values)
            .filter_map(|(&t, row)| row[c].map(|v| (t, v)))
            .unzip();
        if knots.len() < 2 {
            return Err(Error::SparseChannel {
                channel: c,
                observed: knots.len(),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("channel {c} has a non-finite value")));
        }
        channels.push(CubicSpline::natural(&knots, &vals)?);
    }
    if opts.observation_intensity {
        for c in 0..d {
            let mut count = 0.0;
            let cumulative: Vec<f64> = sample
                .values
                .iter()
                .map(|row| {
                    if row[c].is_some() {
                        count += 1.0;
                    }
                    count
                })
                .collect();
            channels.push(CubicSpline::natural(&sample.times, &cumulative)?);
        }
    }
    Ok(SplinePath {
        channels,
        time_channel: opts.time_channel,
        knots: sample.times.clone(),
        out_of_domain: opts.out_of_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(times: &[f64], ys: &[f64]) -> SplinePath {
        let s = TimeSeriesSample::dense(times.to_vec(), ys.iter().map(|&y| vec![y]).collect(), None).unwrap();
        fit_spline(&s, &SplineOptions::default()).unwrap()
    }

    /// Natural-spline second derivatives by dense Gaussian elimination on the
    /// full (n x n) system, boundary rows included.
    fn oracle_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            a[i][i - 1] = h0;
            a[i][i] = 2.0 * (h0 + h1);
            a[i][i + 1] = h1;
            a[i][n] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    fn oracle_eval(x: &[f64], y: &[f64], t: f64) -> f64 {
        let m = oracle_second_derivatives(x, y);
        let i = (0..x.len() - 1).find(|&i| t <= x[i + 1]).unwrap();
        let h = x[i + 1] - x[i];
        let (p, q) = (x[i + 1] - t, t - x[i]);
        m[i] * p.powi(3) / (6.0 * h)
            + m[i + 1] * q.powi(3) / (6.0 * h)
            + (y[i] / h - m[i] * h / 6.0) * p
            + (y[i + 1] / h - m[i + 1] * h / 6.0) * q
    }

    #[test]
    fn affine_data_is_reproduced() {
        let p = path(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]);
        assert_eq!(p.eval(0.5).unwrap(), vec![0.5, 0.5]);
        for t in [0.0, 0.3, 1.0, 1.7, 2.0] {
            assert!((p.derivative(t).unwrap()[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn knots_are_interpolated() {
        let p = path(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]);
        for (t, y) in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)] {
            assert_eq!(p.eval(t).unwrap()[0], y);
        }
    }

    #[test]
    fn midpoint_matches_dense_oracle() {
        let (x, y) = ([0.0, 1.0, 2.0], [0.0, 1.0, 0.0]);
        let expected = oracle_eval(&x, &y, 0.5);
        // by hand: M1 = -3, piece 0 is 1.5u - 0.5u^3
        assert!((expected - 0.6875).abs() < 1e-15);
        let p = path(&x, &y);
        assert!((p.eval(0.5).unwrap()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn irregular_knots_match_oracle() {
        let x = [0.0, 0.4, 1.5, 1.9, 3.2, 4.0, 6.5];
        let y = [1.0, -0.3, 2.2, 0.1, 0.0, 1.4, -2.0];
        let p = path(&x, &y);
        for t in [0.1, 0.9, 1.6, 2.5, 3.9, 5.0, 6.4] {
            assert!((p.eval(t).unwrap()[0] - oracle_eval(&x, &y, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn time_channel_derivative_is_one() {
        let p = path(&[0.0, 1.0, 3.0], &[2.0, -1.0, 0.5]);
        assert_eq!(p.dim(), 2);
        for t in [0.0, 0.5, 2.9] {
            assert_eq!(p.derivative(t).unwrap()[1], 1.0);
            assert_eq!(p.eval(t).unwrap()[1], t);
        }
    }

    #[test]
    fn out_of_domain_errors_by_default() {
        let p = path(&[0.0, 1.0], &[0.0, 1.0]);
        assert_eq!(p.eval(1.5).unwrap_err(), Error::Domain { t: 1.5, lo: 0.0, hi: 1.0 });
        let clamped = p.clone().with_out_of_domain(OutOfDomain::Clamp);
        assert_eq!(clamped.eval(1.5).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn sparse_channel_is_rejected() {
        let s = TimeSeriesSample::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![Some(1.0), Some(0.0)], vec![None, Some(1.0)], vec![None, Some(2.0)]],
            None,
        )
        .unwrap();
        assert_eq!(
            fit_spline(&s, &SplineOptions::default()).unwrap_err(),
            Error::SparseChannel { channel: 0, observed: 1 }
        );
    }

    #[test]
    fn non_increasing_times_rejected() {
        let err = TimeSeriesSample::dense(vec![0.0, 1.0, 1.0], vec![vec![0.0]; 3], None).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn missing_entries_use_channel_knots() {
        let s = TimeSeriesSample::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![
                vec![Some(0.0), Some(5.0)],
                vec![None, Some(4.0)],
                vec![Some(2.0), None],
                vec![Some(3.0), Some(1.0)],
            ],
            None,
        )
        .unwrap();
        let p = fit_spline(&s, &SplineOptions::default()).unwrap();
        assert_eq!(p.channel(0).knots(), &[0.0, 2.0, 3.0]);
        assert_eq!(p.channel(1).knots(), &[0.0, 1.0, 3.0]);
        assert_eq!(p.eval(2.0).unwrap()[0], 2.0);
        assert_eq!(p.eval(1.0).unwrap()[1], 4.0);
    }

    #[test]
    fn observation_intensity_counts() {
        let s = TimeSeriesSample::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![Some(0.0)], vec![None], vec![Some(1.0)]],
            None,
        )
        .unwrap();
        let opts = SplineOptions {
            observation_intensity: true,
            ..Default::default()
        };
        let p = fit_spline(&s, &opts).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.eval(1.0).unwrap()[1], 1.0);
        assert_eq!(p.eval(2.0).unwrap()[1], 2.0);
    }

    #[test]
    fn two_knots_is_linear() {
        let p = path(&[1.0, 3.0], &[2.0, 6.0]);
        assert!((p.eval(2.5).unwrap()[0] - 5.0).abs() < 1e-15);
        assert_eq!(p.second_derivative(2.0).unwrap()[0], 0.0);
    }
}
