//! Entropy confidence, deterministic top-k ranking and expected calibration
//! error.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Floor on the mean entropy so that confidence stays finite.
pub const ENTROPY_FLOOR: f64 = 1e-6;
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibError {
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("confidence needs at least one token distribution")]
    EmptySequence,
    #[error("calibration needs at least one prediction")]
    EmptyInput,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("bin count must be positive")]
    NoBins,
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> Result<f64, CalibError> {
    if dist.is_empty() {
        return Err(CalibError::InvalidDistribution("empty".into()));
    }
    if let Some(p) = dist.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(CalibError::InvalidDistribution(format!("entry {p}")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(CalibError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// `1 / max(mean entropy, ENTROPY_FLOOR)`.
pub fn confidence_from_entropies(entropies: &[f64]) -> Result<f64, CalibError> {
    if entropies.is_empty() {
        return Err(CalibError::EmptySequence);
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    Ok(1.0 / mean.max(ENTROPY_FLOOR))
}

pub fn confidence<D: AsRef<[f64]>>(dists: &[D]) -> Result<f64, CalibError> {
    let h = dists.iter().map(|d| token_entropy(d.as_ref())).collect::<Result<Vec<_>, _>>()?;
    confidence_from_entropies(&h)
}

/// Ordering key: higher confidence first, then video id, segment index
/// and start ascending.
pub trait RankKey {
    fn confidence(&self) -> f64;
    fn video_id(&self) -> &str;
    fn segment_index(&self) -> usize;
    fn start(&self) -> f64;
}

pub fn rank_order<T: RankKey>(a: &T, b: &T) -> Ordering {
    b.confidence()
        .total_cmp(&a.confidence())
        .then_with(|| a.video_id().cmp(b.video_id()))
        .then_with(|| a.segment_index().cmp(&b.segment_index()))
        .then_with(|| a.start().total_cmp(&b.start()))
}

/// The `k` best items under [`rank_order`]; input order is irrelevant.
pub fn rank_topk<T: RankKey>(mut items: Vec<T>, k: usize) -> Vec<T> {
    items.sort_by(rank_order);
    items.truncate(k);
    items
}

/// Rescales to `[0, 1]` by the set's minimum and maximum. A constant set
/// maps to all ones.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub total: usize,
    pub iou_threshold: Option<f64>,
}

impl CalibrationReport {
    /// Per-bin CSV rows followed by a summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,count,mean_confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", b.count, b.mean_confidence, b.accuracy);
        }
        let tau = self.iou_threshold.map_or_else(String::new, |t| t.to_string());
        let _ = writeln!(s, "# ece={},n={},bins={},iou_threshold={tau}", self.ece, self.total, self.bins.len());
        s
    }
}

/// Expected calibration error over `bins` equal-width bins of `[0, 1]`.
/// Confidence `c` falls in bin `min(⌊c·B⌋, B−1)`; empty bins contribute 0.
pub fn ece(scored: &[(f64, bool)], bins: usize) -> Result<CalibrationReport, CalibError> {
    if bins == 0 {
        return Err(CalibError::NoBins);
    }
    if scored.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let mut sum_conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(c, ok) in scored {
        if !(0.0..=1.0).contains(&c) {
            return Err(CalibError::ConfidenceOutOfRange(c));
        }
        let j = ((c * bins as f64).floor() as usize).min(bins - 1);
        counts[j] += 1;
        sum_conf[j] += c;
        hits[j] += ok as usize;
    }
    let n = scored.len() as f64;
    let mut total = 0.0;
    let stats = (0..bins)
        .map(|j| {
            if counts[j] == 0 {
                return BinStat { count: 0, mean_confidence: 0.0, accuracy: 0.0 };
            }
            let m = counts[j] as f64;
            let b = BinStat { count: counts[j], mean_confidence: sum_conf[j] / m, accuracy: hits[j] as f64 / m };
            total += m / n * (b.mean_confidence - b.accuracy).abs();
            b
        })
        .collect();
    Ok(CalibrationReport { bins: stats, ece: total, total: scored.len(), iou_threshold: None })
}
