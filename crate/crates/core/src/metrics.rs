//! Uncertainty signals and the statistics computed from them: entropy,
//! the joint code/label score, reliability bins with Wilson intervals and
//! ECE, and exact threshold-free detection metrics.
//!
//! Records and statistics use `f64` regardless of the model scalar.
//! Detection metrics treat higher scores as "more positive" and process
//! tied scores as one atomic group, so results never depend on input order.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::data::ImageDataset;
use crate::diff::Tensor;
use crate::model::{BaselineModel, Model, ModelError, VibModel};
use crate::parallel;
use crate::scalar::{log_sum_exp, Scalar};
use crate::training::{argmax, EVAL_CHUNK};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} score list is empty")]
    Empty(&'static str),
    #[error("{records} records cannot fill {bins} bins")]
    TooFewRecords { records: usize, bins: usize },
    #[error("need at least one bin")]
    NoBins,
    #[error("signal {0} requires a latent density model")]
    MissingSignal(Signal),
    #[error("unknown signal `{0}` (expected p, H, R or joint)")]
    UnknownSignal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<V> = std::result::Result<V, MetricsError>;

/// `−Σ p_i ln p_i` in nats; zero entries contribute nothing.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&pi| pi > T::zero())
        .map(|&pi| -pi * pi.ln())
        .sum()
}

/// Per-instance uncertainty signals.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRecord {
    pub max_prob: f64,
    pub entropy: f64,
    /// Monte Carlo rate; absent for the baseline.
    pub rate: Option<f64>,
    /// `log (1/S) Σ_s m(z_s) q(ŷ|z_s)`; absent for the baseline.
    pub joint_log: Option<f64>,
    pub predicted: usize,
    /// `None` for out-of-distribution inputs without a label.
    pub label: Option<usize>,
}

impl UncertaintyRecord {
    pub fn correct(&self) -> bool {
        self.label == Some(self.predicted)
    }

    fn from_probs<T: Scalar>(p: &[T], label: Option<usize>) -> Self {
        let predicted = argmax(p);
        UncertaintyRecord {
            max_prob: p[predicted].as_f64(),
            entropy: entropy(p).as_f64(),
            rate: None,
            joint_log: None,
            predicted,
            label,
        }
    }
}

/// The four uncertainty signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    /// Maximum predicted probability.
    P,
    /// Predictive entropy.
    H,
    /// Rate.
    R,
    /// Joint code/label log score.
    Joint,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::P, Signal::H, Signal::R, Signal::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Signal::P => "p",
            Signal::H => "H",
            Signal::R => "R",
            Signal::Joint => "joint",
        }
    }

    /// Raw signal value.
    pub fn value(self, r: &UncertaintyRecord) -> Option<f64> {
        match self {
            Signal::P => Some(r.max_prob),
            Signal::H => Some(r.entropy),
            Signal::R => r.rate,
            Signal::Joint => r.joint_log,
        }
    }

    /// Score oriented so that higher means more in-distribution (or more
    /// likely correct): entropy and rate are negated.
    pub fn score(self, r: &UncertaintyRecord) -> Result<f64> {
        let v = self.value(r).ok_or(MetricsError::MissingSignal(self))?;
        Ok(match self {
            Signal::H | Signal::R => -v,
            Signal::P | Signal::Joint => v,
        })
    }

    pub fn needs_latent(self) -> bool {
        matches!(self, Signal::R | Signal::Joint)
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(Signal::P),
            "H" => Ok(Signal::H),
            "R" => Ok(Signal::R),
            "joint" => Ok(Signal::Joint),
            other => Err(MetricsError::UnknownSignal(other.to_string())),
        }
    }
}

/// Records for a batch from one Monte Carlo evaluation.
fn vib_records<T: Scalar>(model: &VibModel<T>, x: &Tensor<T>, labels: &[Option<usize>], samples: usize, seed: u64, first: u64) -> Result<Vec<UncertaintyRecord>> {
    let ev = model.evaluate(x, samples, seed, first)?;
    let c = model.config.class_count;
    let ln_s = T::from_count(samples).ln();
    let out = ev
        .probs
        .data()
        .chunks(c)
        .enumerate()
        .map(|(b, p)| {
            let mut rec = UncertaintyRecord::from_probs(p, labels[b]);
            let terms: Vec<T> = (0..samples)
                .map(|s| {
                    let row = b * samples + s;
                    ev.marginal_log_prob[row] + ev.log_probs.data()[row * c + rec.predicted]
                })
                .collect();
            rec.rate = Some(ev.rate[b].as_f64());
            rec.joint_log = Some((log_sum_exp(&terms) - ln_s).as_f64());
            rec
        })
        .collect();
    Ok(out)
}

/// `log (1/S) Σ_s m(z_s) q(ŷ|z_s)` for one input, on the same samples that
/// [`VibModel::predict`] uses with this seed.
pub fn joint_score<T: Scalar>(model: &VibModel<T>, x: &[T], samples: usize, seed: u64) -> Result<f64> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec()).map_err(ModelError::from)?;
    let recs = vib_records(model, &xt, &[None], samples, seed, 0)?;
    Ok(recs[0].joint_log.expect("vib record"))
}

/// All signals for every instance; instance `i` uses evaluation noise keyed
/// by `(seed, i)`.
pub fn score_vib<T: Scalar>(model: &VibModel<T>, ds: &ImageDataset<T>, samples: usize, seed: u64) -> Result<Vec<UncertaintyRecord>> {
    let parts = parallel::map_chunks(ds.len(), EVAL_CHUNK, |s, e| {
        vib_records(model, &ds.range(s, e), &ds.labels[s..e], samples, seed, s as u64)
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `p` and `H` records from `softmax(logits / T)`.
pub fn score_baseline<T: Scalar>(model: &BaselineModel<T>, ds: &ImageDataset<T>, temperature: T) -> Result<Vec<UncertaintyRecord>> {
    let c = model.config.class_count;
    let parts = parallel::map_chunks(ds.len(), EVAL_CHUNK, |s, e| -> Result<Vec<UncertaintyRecord>> {
        let probs = model.predict_batch(&ds.range(s, e), temperature)?;
        Ok(probs
            .data()
            .chunks(c)
            .zip(&ds.labels[s..e])
            .map(|(p, &y)| UncertaintyRecord::from_probs(p, y))
            .collect())
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores a dataset with either model kind; `temperature` applies to the
/// baseline only, `samples` and `seed` to the VIB model only.
pub fn score_dataset<T: Scalar>(model: &Model<T>, ds: &ImageDataset<T>, samples: usize, seed: u64, temperature: T) -> Result<Vec<UncertaintyRecord>> {
    match model {
        Model::Vib(m) => score_vib(m, ds, samples, seed),
        Model::Baseline(m) => score_baseline(m, ds, temperature),
    }
}

// ---- calibration ---------------------------------------------------------

/// Two-sided 90% standard normal quantile.
pub const Z_90: f64 = 1.644_853_626_951_472_2;

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinMode {
    /// Contiguous groups of (nearly) equal size after sorting by confidence.
    #[default]
    Count,
    /// Equal-width confidence intervals on `[0, 1]`.
    Width,
}

impl FromStr for BinMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "count" => Ok(BinMode::Count),
            "width" => Ok(BinMode::Width),
            other => Err(format!("unknown bin mode `{}` (expected count or width)", other)),
        }
    }
}

/// One reliability bin. Confidence and accuracy are NaN for an empty bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub count: usize,
    pub correct: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub accuracy: f64,
    pub records: usize,
}

fn make_bin(group: &[(f64, bool)]) -> ReliabilityBin {
    let count = group.len();
    let correct = group.iter().filter(|r| r.1).count();
    let (ci_low, ci_high) = wilson_interval(correct, count, Z_90);
    let (mean_confidence, accuracy) = if count == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let conf: f64 = group.iter().map(|r| r.0).sum();
        (conf / count as f64, correct as f64 / count as f64)
    };
    ReliabilityBin {
        count,
        correct,
        mean_confidence,
        accuracy,
        ci_low,
        ci_high,
    }
}

/// Reliability bins over `(confidence, correct)` pairs ordered by
/// confidence, with `ECE = Σ (n_b / N) |acc_b − conf_b|`.
///
/// In count mode the first `N mod bins` groups hold one extra record; equal
/// confidences keep their input order. Requires `N ≥ bins` in count mode.
pub fn reliability_pairs(pairs: &[(f64, bool)], bins: usize, mode: BinMode) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let n = pairs.len();
    if n < bins && mode == BinMode::Count {
        return Err(MetricsError::TooFewRecords { records: n, bins });
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let groups: Vec<&[(f64, bool)]> = match mode {
        BinMode::Count => {
            let (base, extra) = (n / bins, n % bins);
            let mut start = 0;
            (0..bins)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let g = &sorted[start..start + len];
                    start += len;
                    g
                })
                .collect()
        }
        BinMode::Width => {
            let mut start = 0;
            (0..bins)
                .map(|i| {
                    let upper = (i + 1) as f64 / bins as f64;
                    let end = if i + 1 == bins {
                        n
                    } else {
                        start + sorted[start..].partition_point(|r| r.0 < upper)
                    };
                    let g = &sorted[start..end];
                    start = end;
                    g
                })
                .collect()
        }
    };
    let bins: Vec<ReliabilityBin> = groups.iter().map(|g| make_bin(g)).collect();
    let total = n.max(1) as f64;
    let ece = bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total * (b.accuracy - b.mean_confidence).abs())
        .sum();
    let correct: usize = bins.iter().map(|b| b.correct).sum();
    Ok(CalibrationReport {
        bins,
        ece,
        accuracy: correct as f64 / total,
        records: n,
    })
}

/// Reliability bins over labeled records by `max_prob`.
pub fn reliability(records: &[UncertaintyRecord], bins: usize, mode: BinMode) -> Result<CalibrationReport> {
    let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.max_prob, r.correct())).collect();
    reliability_pairs(&pairs, bins, mode)
}

pub const RELIABILITY_HEADER: &str = "bin_index,count,mean_confidence,accuracy,ci_low,ci_high";

fn num(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{}", x)
    }
}

pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut s = String::from(RELIABILITY_HEADER);
    s.push('\n');
    for (i, b) in report.bins.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i,
            b.count,
            num(b.mean_confidence),
            num(b.accuracy),
            num(b.ci_low),
            num(b.ci_high)
        );
    }
    s
}

// ---- detection -----------------------------------------------------------

/// `(score, is_positive)` sorted by descending score.
fn ranked(pos: &[f64], neg: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// Positive and negative counts of each tied group, highest score first.
fn tie_groups(pos: &[f64], neg: &[f64]) -> Vec<(u64, u64)> {
    let all = ranked(pos, neg);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0, 0);
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        groups.push((p, n));
        i = j;
    }
    groups
}

fn nonempty(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() {
        return Err(MetricsError::Empty("positive"));
    }
    if neg.is_empty() {
        return Err(MetricsError::Empty("negative"));
    }
    Ok(())
}

/// `P(pos > neg) + ½ P(pos = neg)` from exact integer counts.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    nonempty(pos, neg)?;
    // twice the Mann-Whitney U: 2·wins + ties
    let mut twice_u: u128 = 0;
    let mut neg_below = neg.len() as u128;
    for (p, n) in tie_groups(pos, neg) {
        neg_below -= n as u128;
        twice_u += p as u128 * (2 * neg_below + n as u128);
    }
    let pairs = pos.len() as u128 * neg.len() as u128;
    Ok(twice_u as f64 / (2 * pairs) as f64)
}

/// Average precision `Σ (R_i − R_{i−1}) P_i` over descending tie groups.
pub fn aupr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    nonempty(pos, neg)?;
    let total = pos.len() as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in tie_groups(pos, neg) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / total) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// False-positive rate at the first threshold, sweeping from the highest
/// score down, whose true-positive rate reaches `target`.
pub fn fpr_at_tpr(pos: &[f64], neg: &[f64], target: f64) -> Result<f64> {
    nonempty(pos, neg)?;
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(pos, neg) {
        tp += p;
        fp += n;
        if tp as f64 / np >= target {
            return Ok(fp as f64 / nn);
        }
    }
    Ok(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub fpr_at_95_tpr: f64,
}

/// All four detection metrics with `positive` scores as the positive class
/// ("in"); AUPR-Out swaps the roles and negates the scores.
pub fn detection_from_scores(positive: &[f64], negative: &[f64]) -> Result<DetectionReport> {
    let neg_pos: Vec<f64> = positive.iter().map(|&s| -s).collect();
    let neg_neg: Vec<f64> = negative.iter().map(|&s| -s).collect();
    Ok(DetectionReport {
        auroc: auroc(positive, negative)?,
        aupr_in: aupr(positive, negative)?,
        aupr_out: aupr(&neg_neg, &neg_pos)?,
        fpr_at_95_tpr: fpr_at_tpr(positive, negative, 0.95)?,
    })
}

pub fn signal_scores(records: &[UncertaintyRecord], signal: Signal) -> Result<Vec<f64>> {
    records.iter().map(|r| signal.score(r)).collect()
}

/// In-distribution records are the positive class.
pub fn detection_report(in_records: &[UncertaintyRecord], out_records: &[UncertaintyRecord], signal: Signal) -> Result<DetectionReport> {
    detection_from_scores(&signal_scores(in_records, signal)?, &signal_scores(out_records, signal)?)
}

/// Correctly classified records are the positive class, so AUPR-Out ranks
/// error detection. `None` when either class is empty.
pub fn error_detection_report(records: &[UncertaintyRecord], signal: Signal) -> Result<Option<DetectionReport>> {
    let (right, wrong): (Vec<&UncertaintyRecord>, Vec<&UncertaintyRecord>) = records.iter().partition(|r| r.correct());
    if right.is_empty() || wrong.is_empty() {
        return Ok(None);
    }
    let score = |rs: &[&UncertaintyRecord]| rs.iter().map(|r| signal.score(r)).collect::<Result<Vec<f64>>>();
    Ok(Some(detection_from_scores(&score(&right)?, &score(&wrong)?)?))
}

pub const DETECTION_HEADER: &str = "signal,ood_set,fpr_at_95_tpr,auroc,aupr_in,aupr_out";

/// One detection CSV row; `None` metrics are written as `NA`.
pub fn detection_row(signal: Signal, set: &str, report: Option<&DetectionReport>) -> String {
    match report {
        Some(r) => format!(
            "{},{},{},{},{},{}\n",
            signal,
            csv_field(set),
            r.fpr_at_95_tpr,
            r.auroc,
            r.aupr_in,
            r.aupr_out
        ),
        None => format!("{},{},NA,NA,NA,NA\n", signal, csv_field(set)),
    }
}

/// Quotes a CSV field when it holds a separator, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SCORE_DUMP_HEADER: &str = "set,index,label,signal,value";

/// Per-instance raw signal values (`label` is `ood` for unlabeled inputs).
pub fn score_dump_rows(set: &str, records: &[UncertaintyRecord], signals: &[Signal], out: &mut String) {
    for (i, r) in records.iter().enumerate() {
        let label = r.label.map_or_else(|| "ood".to_string(), |l| l.to_string());
        for &s in signals {
            if let Some(v) = s.value(r) {
                let _ = writeln!(out, "{},{},{},{},{}", csv_field(set), i, label, s, v);
            }
        }
    }
}
