//! Measurement instruments: confidence estimators over answer
//! distributions, expected calibration error with equal-width binning,
//! reliability-diagram data, and post-hoc temperature scaling.
//!
//! Everything here works on `f64` record lists extracted from model outputs;
//! the functions are pure and order-independent.

use crate::error::{Error, Result};

/// How a scalar confidence is read off an answer distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Maximum softmax probability.
    Msp,
    /// `1 − H(p)/ln C`: normalized complement of the distribution entropy.
    Entropy,
    /// Gap between the largest and second-largest probabilities.
    Margin,
}

pub const ALL_ESTIMATORS: [Estimator; 3] = [Estimator::Msp, Estimator::Entropy, Estimator::Margin];

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Msp => "msp",
            Estimator::Entropy => "entropy",
            Estimator::Margin => "margin",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        match s {
            "msp" => Ok(Estimator::Msp),
            "entropy" => Ok(Estimator::Entropy),
            "margin" => Ok(Estimator::Margin),
            other => Err(Error::Config(format!(
                "unknown estimator '{other}' (expected msp, entropy, or margin)"
            ))),
        }
    }

    pub fn confidence(&self, probs: &[f64]) -> f64 {
        match self {
            Estimator::Msp => confidence_msp(probs),
            Estimator::Entropy => confidence_entropy(probs),
            Estimator::Margin => confidence_margin(probs, 2),
        }
    }
}

/// Maximum softmax probability.
pub fn confidence_msp(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}

/// `1 − H(p)/ln C` with `0·ln 0 := 0`, clamped to `[0, 1]`.
pub fn confidence_entropy(probs: &[f64]) -> f64 {
    let c = probs.len() as f64;
    if probs.len() < 2 {
        return 1.0;
    }
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    (1.0 - h / c.ln()).clamp(0.0, 1.0)
}

/// Difference between the largest and k-th largest probabilities (k ≥ 2).
pub fn confidence_margin(probs: &[f64], k: usize) -> f64 {
    debug_assert!(k >= 2 && probs.len() >= k);
    let mut sorted: Vec<f64> = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
    (sorted[0] - sorted[k - 1]).clamp(0.0, 1.0)
}

/// One evaluated example under one estimator.
#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub correct: bool,
    pub confidence: f64,
}

impl PredictionRecord {
    /// Build from an answer distribution; `predicted` is the argmax with
    /// ties broken toward the lowest index.
    pub fn new(probs: Vec<f64>, label: usize, estimator: Estimator) -> Self {
        let mut predicted = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[predicted] {
                predicted = i;
            }
        }
        let confidence = estimator.confidence(&probs);
        PredictionRecord { probs, predicted, correct: predicted == label, confidence }
    }
}

/// One bin of a reliability diagram. Empty bins keep zero means.
#[derive(Clone, Debug, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub estimator: Estimator,
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub accuracy: f64,
    pub sample_count: usize,
}

/// Expected calibration error over equal-width confidence bins.
///
/// Confidence `c` lands in bin `⌊c·bins⌋`, clamped so that 1.0 falls in the
/// last bin; ECE is the count-weighted mean absolute gap between each
/// non-empty bin's mean confidence and mean accuracy.
pub fn compute_ece(
    records: &[PredictionRecord],
    estimator: Estimator,
    bin_count: usize,
) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::Input("cannot compute calibration of zero records".into()));
    }
    if bin_count == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    let mut count = vec![0usize; bin_count];
    let mut conf_sum = vec![0.0f64; bin_count];
    let mut acc_sum = vec![0.0f64; bin_count];
    let mut correct_total = 0usize;
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Input(format!(
                "confidence {} outside [0, 1]",
                r.confidence
            )));
        }
        let idx = ((r.confidence * bin_count as f64) as usize).min(bin_count - 1);
        count[idx] += 1;
        conf_sum[idx] += r.confidence;
        acc_sum[idx] += r.correct as u8 as f64;
        correct_total += r.correct as usize;
    }
    let total = records.len() as f64;
    let mut bins = Vec::with_capacity(bin_count);
    let mut ece = 0.0;
    for i in 0..bin_count {
        let (mean_confidence, mean_accuracy) = if count[i] > 0 {
            (conf_sum[i] / count[i] as f64, acc_sum[i] / count[i] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[i] > 0 {
            ece += count[i] as f64 / total * (mean_confidence - mean_accuracy).abs();
        }
        bins.push(BinStat {
            lo: i as f64 / bin_count as f64,
            hi: (i + 1) as f64 / bin_count as f64,
            count: count[i],
            mean_confidence,
            mean_accuracy,
        });
    }
    Ok(CalibrationReport {
        estimator,
        bins,
        ece,
        accuracy: correct_total as f64 / total,
        sample_count: records.len(),
    })
}

/// Reliability-diagram CSV: `bin_lo,bin_hi,count,avg_conf,avg_acc` rows plus
/// trailing `# ece=` / `# acc=` summary comments.
pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,avg_conf,avg_acc\n");
    for b in &report.bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_confidence, b.mean_accuracy
        ));
    }
    out.push_str(&format!("# ece={}\n# acc={}\n", report.ece, report.accuracy));
    out
}

/// One validation example for temperature fitting: raw (pre-softmax) logits
/// and the true label.
#[derive(Clone, Debug)]
pub struct LogitRecord {
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Post-hoc scaler: probabilities are `softmax(logits / t)`.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureScaler {
    pub t: f64,
    /// Set when the search ran into a boundary of its range — typically a
    /// degenerate validation set where colder/hotter is monotonically
    /// better; `t` is still the best value found.
    pub warning: bool,
}

impl TemperatureScaler {
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        softmax_scaled(logits, self.t)
    }
}

fn softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &v in logits {
        mx = mx.max(v / t);
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v / t - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean NLL of `softmax(logits / t)` over the records.
pub fn scaled_nll(records: &[LogitRecord], t: f64) -> f64 {
    let mut acc = 0.0;
    for r in records {
        let probs = softmax_scaled(&r.logits, t);
        acc -= probs[r.label].max(f64::MIN_POSITIVE).ln();
    }
    acc / records.len() as f64
}

const LOG_T_LO: f64 = -2.995732273553991; // ln 0.05
const LOG_T_HI: f64 = 2.995732273553991; // ln 20
const LOG_T_TOL: f64 = 1e-4;

/// Fit the temperature minimizing validation NLL.
///
/// Golden-section search over `ln T ∈ [ln 0.05, ln 20]` to a log-space
/// tolerance of 1e-4; `T = 1` is always kept as a candidate, so the result
/// never has higher NLL than no scaling.
pub fn fit_temperature(records: &[LogitRecord]) -> Result<TemperatureScaler> {
    if records.is_empty() {
        return Err(Error::Input("temperature fitting needs validation records".into()));
    }
    let classes = records[0].logits.len();
    if classes < 2 {
        return Err(Error::Input("need at least two classes to scale".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.logits.len() != classes {
            return Err(Error::Input(format!(
                "record {i} has {} logits, expected {classes}",
                r.logits.len()
            )));
        }
        if r.label >= classes {
            return Err(Error::Input(format!(
                "record {i} label {} out of range for {classes} classes",
                r.label
            )));
        }
    }

    let f = |x: f64| scaled_nll(records, x.exp());
    // Golden-section search on the unimodal-in-practice NLL curve.
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_LO, LOG_T_HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > LOG_T_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let searched = x.exp();
    // Never worse than the identity temperature.
    let (t, best) = if f(0.0) <= f(x) { (1.0, f(0.0)) } else { (searched, f(x)) };
    // Degenerate sets (one separable label) have no interior optimum: the
    // search either hits a range boundary or lands on a plateau where the
    // NLL has underflowed to zero. Either way the fit is not meaningful.
    let at_boundary = (x - LOG_T_LO).abs() < 10.0 * LOG_T_TOL
        || (x - LOG_T_HI).abs() < 10.0 * LOG_T_TOL;
    let warning = t != 1.0 && (at_boundary || best < 1e-9);
    Ok(TemperatureScaler { t, warning })
}
