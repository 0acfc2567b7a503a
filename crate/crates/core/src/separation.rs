//! Source-calibrated thresholding and the known/unknown partition of target
//! samples.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default fraction of source samples that must be classified as known.
pub const DEFAULT_RETENTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreConvention {
    HigherIsUnknown,
    HigherIsKnown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub convention: ScoreConvention,
    pub retention: f64,
}

impl Threshold {
    /// Ties at the threshold are known.
    pub fn is_unknown(&self, score: f64) -> bool {
        match self.convention {
            ScoreConvention::HigherIsUnknown => score > self.value,
            ScoreConvention::HigherIsKnown => score < self.value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition<Id> {
    pub known: Vec<Id>,
    pub unknown: Vec<Id>,
}

/// Smallest `c` in `1..=m` with `c / m >= fraction`.
pub(crate) fn min_count_for_fraction(m: usize, fraction: f64) -> usize {
    (1..=m)
        .find(|&c| c as f64 / m as f64 >= fraction)
        .unwrap_or(m)
}

/// Lower empirical quantile of the source scores such that at least
/// `ceil(retention * m)` of them fall on the known side of the threshold.
/// The returned value is always one of the observed scores.
pub fn calibrate_threshold(
    source_scores: &[f64],
    retention: f64,
    convention: ScoreConvention,
) -> Result<Threshold> {
    if source_scores.is_empty() {
        return Err(invalid("cannot calibrate a threshold on zero scores"));
    }
    if !(retention > 0.0 && retention < 1.0) {
        return Err(invalid(format!(
            "retention must lie in (0, 1), got {retention}"
        )));
    }
    if source_scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN source score"));
    }
    let mut sorted = source_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let c = min_count_for_fraction(sorted.len(), retention);
    let value = match convention {
        ScoreConvention::HigherIsUnknown => sorted[c - 1],
        ScoreConvention::HigherIsKnown => sorted[sorted.len() - c],
    };
    Ok(Threshold {
        value,
        convention,
        retention,
    })
}

/// Splits scored samples by the threshold, preserving input order.
pub fn separate<Id: Clone>(scores: &[(Id, f64)], threshold: &Threshold) -> Partition<Id> {
    let mut partition = Partition {
        known: Vec::new(),
        unknown: Vec::new(),
    };
    for (id, score) in scores {
        if threshold.is_unknown(*score) {
            partition.unknown.push(id.clone());
        } else {
            partition.known.push(id.clone());
        }
    }
    partition
}
