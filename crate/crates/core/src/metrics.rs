//! Open-set evaluation metrics. All functions take scores where higher means
//! more in-distribution; callers negate unknown-oriented scores.
//!
//! Thresholds are restricted to observed pooled scores plus `+inf`, and a
//! sample is predicted in-distribution when `score >= threshold`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_TPR: f64 = 0.95;
pub const DEFAULT_FPR: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
    /// Classifier argmax equals the true label. Always false for OOD samples.
    pub pred_correct: bool,
}

impl ScoredSample {
    pub fn known(score: f64, pred_correct: bool) -> Self {
        Self {
            score,
            is_id: true,
            pred_correct,
        }
    }

    pub fn unknown(score: f64) -> Self {
        Self {
            score,
            is_id: false,
            pred_correct: false,
        }
    }
}

/// CCR@FPR10, FPR95 and AUROC, each in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub ccr_at_fpr10: f64,
    pub fpr95: f64,
    pub auroc: f64,
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid(format!("{name} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid(format!("{name} scores contain NaN")));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `#{x in sorted_asc : x >= t}`
fn count_at_least(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|x| *x < t)
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted as half. Computed from sorted ranks in `O((n + m) log m)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let ood = sorted(ood_scores);
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut twice_u: u64 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|x| *x < s);
        let at_or_below = ood.partition_point(|x| *x <= s);
        twice_u += 2 * below as u64 + (at_or_below - below) as u64;
    }
    let pairs = 2 * id_scores.len() as u64 * ood.len() as u64;
    Ok(twice_u as f64 / pairs as f64)
}

/// Fraction of OOD scores at or above the largest threshold that still keeps
/// at least `tpr` of the ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    if !(0.0..=1.0).contains(&tpr) {
        return Err(invalid(format!("tpr must lie in [0, 1], got {tpr}")));
    }
    let n = id_scores.len();
    let mut id_desc = sorted(id_scores);
    id_desc.reverse();
    // Retaining zero samples is satisfied by the +inf threshold.
    if tpr == 0.0 {
        return Ok(0.0);
    }
    let needed = crate::separation::min_count_for_fraction(n, tpr);
    let threshold = id_desc[needed - 1];
    let ood = sorted(ood_scores);
    Ok(count_at_least(&ood, threshold) as f64 / ood.len() as f64)
}

/// Correct classification rate at the smallest pooled threshold whose OOD
/// false-positive rate is at most `fpr`. The denominator is every ID sample.
pub fn ccr_at_fpr(samples: &[ScoredSample], fpr: f64) -> Result<f64> {
    let id: Vec<f64> = samples
        .iter()
        .filter(|s| s.is_id)
        .map(|s| s.score)
        .collect();
    let ood: Vec<f64> = samples
        .iter()
        .filter(|s| !s.is_id)
        .map(|s| s.score)
        .collect();
    if id.is_empty() || ood.is_empty() {
        return Err(invalid("CCR needs at least one ID and one OOD sample"));
    }
    check_scores("ID", &id)?;
    check_scores("OOD", &ood)?;
    if !(0.0..=1.0).contains(&fpr) {
        return Err(invalid(format!("fpr must lie in [0, 1], got {fpr}")));
    }
    let m = ood.len();
    let ood_asc = sorted(&ood);
    // Largest number of OOD samples that may be accepted.
    let allowed = (0..=m)
        .rev()
        .find(|&c| c as f64 / m as f64 <= fpr)
        .unwrap_or(0);
    let threshold = if allowed >= m {
        samples
            .iter()
            .map(|s| s.score)
            .fold(f64::INFINITY, f64::min)
    } else {
        // The (allowed + 1)-th largest OOD score must be rejected.
        let must_reject = ood_asc[m - 1 - allowed];
        samples
            .iter()
            .map(|s| s.score)
            .filter(|s| *s > must_reject)
            .fold(f64::INFINITY, f64::min)
    };
    let accepted_correct = samples
        .iter()
        .filter(|s| s.is_id && s.pred_correct && s.score >= threshold)
        .count();
    Ok(accepted_correct as f64 / id.len() as f64)
}

/// All three metrics at the default operating points, in percent.
pub fn evaluate(samples: &[ScoredSample]) -> Result<MetricTriple> {
    let id: Vec<f64> = samples
        .iter()
        .filter(|s| s.is_id)
        .map(|s| s.score)
        .collect();
    let ood: Vec<f64> = samples
        .iter()
        .filter(|s| !s.is_id)
        .map(|s| s.score)
        .collect();
    Ok(MetricTriple {
        ccr_at_fpr10: 100.0 * ccr_at_fpr(samples, DEFAULT_FPR)?,
        fpr95: 100.0 * fpr_at_tpr(&id, &ood, DEFAULT_TPR)?,
        auroc: 100.0 * auroc(&id, &ood)?,
    })
}
