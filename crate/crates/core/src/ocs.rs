//! Outlier channel splitting.
//!
//! An input channel `m` of a linear layer `y = x W` (W is `in x out`) is
//! replaced by two copies fed the same activation, with weight rows
//!
//! ```text
//! w1 = (w + s/2) / 2,    w2 = (w - s/2) / 2
//! ```
//!
//! `w1 + w2 = w`, so the real-valued output is unchanged, and under a fixed
//! step `s` with round-half-up, `Q_s(w1) + Q_s(w2) = Q_s(w)`: the split also
//! leaves the quantized output unchanged while halving the row's range.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::quant::{round_half_up, QuantizedTensor};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// `||X_i||_2 * max_j |W_ij|`
    XNormTimesWMax,
    WMax,
    XMax,
    Kurtosis,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::XNormTimesWMax => "xnorm_wmax",
            MetricKind::WMax => "wmax",
            MetricKind::XMax => "xmax",
            MetricKind::Kurtosis => "kurtosis",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xnorm_wmax" | "x_norm_times_wmax" => Ok(MetricKind::XNormTimesWMax),
            "wmax" | "w_max" => Ok(MetricKind::WMax),
            "xmax" | "x_max" => Ok(MetricKind::XMax),
            "kurtosis" => Ok(MetricKind::Kurtosis),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

/// Pearson kurtosis `E[(x-mu)^4] / sigma^4`; zero for a constant sample.
pub fn kurtosis(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (m2, m4) = xs.iter().fold((0.0, 0.0), |(m2, m4), &x| {
        let d = x - mean;
        let d2 = d * d;
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == 0.0 {
        0.0
    } else {
        m4 / (m2 * m2)
    }
}

/// Per-input-channel statistics of calibration activations.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    /// Root of summed squares over all tokens.
    pub l2: Vec<f64>,
    pub max_abs: Option<Vec<f64>>,
    pub kurtosis: Option<Vec<f64>>,
    pub tokens: usize,
}

impl CalibrationStats {
    /// Statistics of a `tokens x channels` activation matrix.
    pub fn from_activations(x: &Tensor) -> Result<Self> {
        let (tokens, channels) = x.matrix_dims();
        if tokens == 0 || x.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        let xt = x.transpose();
        let mut l2 = Vec::with_capacity(channels);
        let mut max_abs = Vec::with_capacity(channels);
        let mut kurt = Vec::with_capacity(channels);
        for c in 0..channels {
            let col = xt.row(c);
            l2.push(col.iter().map(|v| v * v).sum::<f64>().sqrt());
            max_abs.push(col.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            kurt.push(kurtosis(col));
        }
        Ok(Self {
            l2,
            max_abs: Some(max_abs),
            kurtosis: Some(kurt),
            tokens,
        })
    }

    /// Statistics known only through their aggregated norms.
    pub fn from_norms(l2: Vec<f64>, tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::invalid("calibration set is empty"));
        }
        if l2.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "channel norms must be finite and non-negative",
            ));
        }
        Ok(Self {
            l2,
            max_abs: None,
            kurtosis: None,
            tokens,
        })
    }

    pub fn channels(&self) -> usize {
        self.l2.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub kind: MetricKind,
    pub scores: Vec<f64>,
    pub tokens: usize,
}

impl SensitivityReport {
    /// `channel,score` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }

    /// Channel indices by descending score, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Sensitivity score per input channel of `w` (`in x out`).
pub fn channel_metric(
    stats: &CalibrationStats,
    w: &Tensor,
    kind: MetricKind,
) -> Result<SensitivityReport> {
    let (m, _) = w.matrix_dims();
    if stats.channels() != m {
        return Err(Error::invalid(format!(
            "calibration has {} channels, weight has {m} input rows",
            stats.channels()
        )));
    }
    let row_max = |i: usize| w.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scores = match kind {
        MetricKind::XNormTimesWMax => (0..m).map(|i| stats.l2[i] * row_max(i)).collect(),
        MetricKind::WMax => (0..m).map(row_max).collect(),
        MetricKind::XMax => stats
            .max_abs
            .clone()
            .ok_or_else(|| Error::invalid("x_max needs raw calibration activations"))?,
        MetricKind::Kurtosis => stats
            .kurtosis
            .clone()
            .ok_or_else(|| Error::invalid("kurtosis needs raw calibration activations"))?,
    };
    Ok(SensitivityReport {
        kind,
        scores,
        tokens: stats.tokens,
    })
}

/// Depth-linear split ratios `r_b = r_min + (b-1)/(B-1) (r_max - r_min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSchedule {
    pub r_min: f64,
    pub r_max: f64,
    pub blocks: usize,
}

pub fn split_schedule(blocks: usize, r_min: f64, r_max: f64) -> Result<SplitSchedule> {
    if blocks == 0 {
        return Err(Error::invalid("block count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&r_min) || !(0.0..=1.0).contains(&r_max) || r_min > r_max {
        return Err(Error::invalid(format!(
            "need 0 <= r_min <= r_max <= 1, got {r_min}, {r_max}"
        )));
    }
    Ok(SplitSchedule {
        r_min,
        r_max,
        blocks,
    })
}

impl SplitSchedule {
    /// Ratio for 1-based block index `b`.
    pub fn ratio(&self, b: usize) -> f64 {
        assert!((1..=self.blocks).contains(&b), "block index out of range");
        if self.blocks == 1 {
            return self.r_min;
        }
        self.r_min + (b - 1) as f64 / (self.blocks - 1) as f64 * (self.r_max - self.r_min)
    }

    pub fn ratios(&self) -> Vec<f64> {
        (1..=self.blocks).map(|b| self.ratio(b)).collect()
    }
}

/// `ceil(ratio * m)`, tolerant of the representation error in `ratio`.
pub fn split_count(ratio: f64, m: usize) -> usize {
    let exact = ratio * m as f64;
    let count = (exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize;
    count.min(m)
}

/// Input channels to duplicate in one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    channels: Vec<usize>,
    input_dim: usize,
}

impl SplitPlan {
    pub fn new(mut channels: Vec<usize>, input_dim: usize) -> Result<Self> {
        channels.sort_unstable();
        channels.dedup();
        if let Some(&c) = channels.iter().find(|&&c| c >= input_dim) {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {input_dim} inputs"
            )));
        }
        Ok(Self {
            channels,
            input_dim,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        Self {
            channels: vec![],
            input_dim,
        }
    }

    /// Top `ceil(ratio * m)` channels of the report.
    pub fn from_report(report: &SensitivityReport, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!(
                "split ratio {ratio} outside [0, 1]"
            )));
        }
        let m = report.scores.len();
        let k = split_count(ratio, m);
        Self::new(report.ranking().into_iter().take(k).collect(), m)
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn widened_dim(&self) -> usize {
        self.input_dim + self.channels.len()
    }

    /// Original channel feeding each row of the widened matrix. Split
    /// channels appear twice, adjacently.
    pub fn index_map(&self) -> Vec<usize> {
        let mut map = Vec::with_capacity(self.widened_dim());
        let mut split = self.channels.iter().peekable();
        for c in 0..self.input_dim {
            map.push(c);
            if split.peek() == Some(&&c) {
                map.push(c);
                split.next();
            }
        }
        map
    }

    /// Widened positions of the two copies of `channel`, if it is split.
    pub fn copies(&self, channel: usize) -> Option<(usize, usize)> {
        let before = self.channels.partition_point(|&c| c < channel);
        (self.channels.get(before) == Some(&channel)).then(|| {
            let first = channel + before;
            (first, first + 1)
        })
    }
}

/// Nearest lattice level `round(v / s)` (round-half-up).
#[inline]
pub fn lattice_level(v: f64, s: f64) -> i64 {
    round_half_up(v / s) as i64
}

/// `Q_s(v) = s * round(v / s)`.
#[inline]
pub fn lattice_quant(v: f64, s: f64) -> f64 {
    s * round_half_up(v / s)
}

/// `((w + s/2) / 2, (w - s/2) / 2)`, whose levels are `ceil(L/2)` and
/// `floor(L/2)` for `L = round(w / s)`.
///
/// Within an ulp of a half-level the three divisions by `s` can round
/// inconsistently, so each half is moved by single ulps until its level is
/// the exact one.
pub fn ra_split_value(w: f64, s: f64) -> (f64, f64) {
    let (mut w1, mut w2) = ((w + s / 2.0) / 2.0, (w - s / 2.0) / 2.0);
    if !(s > 0.0 && s.is_finite() && w.is_finite()) {
        return (w1, w2);
    }
    let l = lattice_level(w, s);
    let (t1, t2) = (l - l.div_euclid(2), l.div_euclid(2));
    for _ in 0..16 {
        let (l1, l2) = (lattice_level(w1, s), lattice_level(w2, s));
        if l1 == t1 && l2 == t2 {
            break;
        }
        if l1 != t1 {
            w1 = if l1 < t1 {
                w1.next_up()
            } else {
                w1.next_down()
            };
        }
        if l2 != t2 {
            w2 = if l2 < t2 {
                w2.next_up()
            } else {
                w2.next_down()
            };
        }
    }
    (w1, w2)
}

/// Rounding-aware split of one weight row at step `s`.
pub fn ra_split_row(w_row: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
    w_row.iter().map(|&w| ra_split_value(w, s)).unzip()
}

/// Step size per weight element used by [`apply_ocs`].
#[derive(Debug, Clone, PartialEq)]
pub enum StepSizes {
    Uniform(f64),
    /// One step per input channel (row of W).
    PerChannel(Vec<f64>),
    /// One step per element, same shape as W.
    PerElement(Tensor),
}

impl StepSizes {
    fn at(&self, row: usize, col: usize) -> f64 {
        match self {
            StepSizes::Uniform(s) => *s,
            StepSizes::PerChannel(v) => v[row],
            StepSizes::PerElement(t) => t.get(row, col),
        }
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        let ok = match self {
            StepSizes::Uniform(s) => *s > 0.0,
            StepSizes::PerChannel(v) => v.len() == m && v.iter().all(|s| *s > 0.0),
            StepSizes::PerElement(t) => {
                t.matrix_dims() == (m, n) && t.values().iter().all(|s| *s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("step sizes must be positive and match W"))
        }
    }
}

/// Per-element steps of an `in x out` weight, read from its group
/// quantization in output-major (`out x in`) layout as used by the GEMV
/// kernels. These are the pre-split steps.
pub fn steps_from_output_major(q: &QuantizedTensor) -> Result<Tensor> {
    let (n, k) = match q.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::invalid(format!("expected a 2-D weight, got {s:?}"))),
    };
    let mut out = vec![0.0; k * n];
    for j in 0..n {
        for i in 0..k {
            out[i * n + j] = q.scale_at(j * k + i);
        }
    }
    Tensor::new(vec![k, n], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcsLayer {
    pub weight: Tensor,
    pub index_map: Vec<usize>,
}

impl OcsLayer {
    /// Activation vector for the widened layer.
    pub fn widen_input(&self, x: &[f64]) -> Vec<f64> {
        self.index_map.iter().map(|&c| x[c]).collect()
    }
}

/// Duplicates the planned rows of `w` (`in x out`) with the rounding-aware
/// split.
pub fn apply_ocs(w: &Tensor, plan: &SplitPlan, steps: &StepSizes) -> Result<OcsLayer> {
    let (m, n) = w.matrix_dims();
    if w.shape().len() != 2 || plan.input_dim() != m {
        return Err(Error::invalid(format!(
            "plan covers {} inputs, weight has shape {:?}",
            plan.input_dim(),
            w.shape()
        )));
    }
    if !plan.channels().is_empty() {
        steps.check(m, n)?;
    }
    let index_map = plan.index_map();
    let mut values = Vec::with_capacity(index_map.len() * n);
    let mut split = plan.channels().iter().peekable();
    for r in 0..m {
        let row = w.row(r);
        if split.peek() == Some(&&r) {
            split.next();
            let (a, b): (Vec<f64>, Vec<f64>) = row
                .iter()
                .enumerate()
                .map(|(c, &v)| ra_split_value(v, steps.at(r, c)))
                .unzip();
            values.extend(a);
            values.extend(b);
        } else {
            values.extend_from_slice(row);
        }
    }
    Ok(OcsLayer {
        weight: Tensor::new(vec![index_map.len(), n], values)?,
        index_map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitErrorReport {
    pub mean_abs_ra: f64,
    pub mean_abs_naive: f64,
    pub mse_ra: f64,
    pub mse_naive: f64,
    pub samples: usize,
}

impl SplitErrorReport {
    pub fn mse_ratio(&self) -> f64 {
        self.mse_naive / self.mse_ra
    }
    pub fn mean_abs_ratio(&self) -> f64 {
        self.mean_abs_naive / self.mean_abs_ra
    }
}

/// Simulates the split error of both strategies on `(x, w)` pairs:
///
/// ```text
/// eps_ra    = x * (Q_s(w1) + Q_s(w2) - w)
/// eps_naive = x * (2 Q_s(w / 2) - w)
/// ```
pub fn split_error_report(samples: &[(f64, f64)], s: f64) -> SplitErrorReport {
    let (mut abs_ra, mut abs_nv, mut sq_ra, mut sq_nv) = (0.0, 0.0, 0.0, 0.0);
    for &(x, w) in samples {
        let (w1, w2) = ra_split_value(w, s);
        let e_ra = x * (lattice_quant(w1, s) + lattice_quant(w2, s) - w);
        let e_nv = x * (2.0 * lattice_quant(w / 2.0, s) - w);
        abs_ra += e_ra.abs();
        abs_nv += e_nv.abs();
        sq_ra += e_ra * e_ra;
        sq_nv += e_nv * e_nv;
    }
    let n = samples.len().max(1) as f64;
    SplitErrorReport {
        mean_abs_ra: abs_ra / n,
        mean_abs_naive: abs_nv / n,
        mse_ra: sq_ra / n,
        mse_naive: sq_nv / n,
        samples: samples.len(),
    }
}

/// `n` pairs with `x = 1` and `w` uniform on `[-10 s, 10 s]`.
pub fn uniform_samples(n: usize, s: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| (1.0, r.random_range(-10.0 * s..10.0 * s)))
        .collect()
}
