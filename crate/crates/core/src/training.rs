//! Pseudolabelling, the bifurcated adaptation loss, and the SGD loop that
//! tunes the prompt vector.
//!
//! Each epoch scores every source and target sample by the L2 norm of the
//! KL-to-uniform prompt gradient, calibrates a threshold on the source
//! scores, splits the target set into known and unknown parts, and then runs
//! minibatch SGD on
//!
//! ```text
//! CE(source) + alpha * mean_known[p_hat * CE(x, y_hat)] + beta * mean_unknown[KL(u || p)]
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{ClassEmbeddings, DenseJacobian, PromptEncoder, PromptState};
use crate::error::{check_dim, invalid, Error, Result};
use crate::math::{
    grad_l2_score, kl_uniform_from_logits, logsumexp, msp_score, prompt_gradient, temp_softmax,
    ProbVector, Temperature,
};
use crate::metrics::{evaluate, MetricTriple, ScoredSample};
use crate::separation::{calibrate_threshold, ScoreConvention, Threshold, DEFAULT_RETENTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Weight of the pseudolabelled target cross-entropy.
    pub alpha: f64,
    /// Weight of the KL-to-uniform term on target samples flagged unknown.
    pub beta: f64,
    /// Reserved. Accepted in configs and recorded, but no loss term uses it.
    pub gamma: f64,
    pub lr: f64,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: Temperature,
    pub retention: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.001,
            lr: 1e-4,
            warmup_lr: 1e-5,
            epochs: 5,
            batch_size: 32,
            temperature: Temperature::DEFAULT,
            retention: DEFAULT_RETENTION,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.warmup_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.retention > 0.0 && self.retention < 1.0) {
            return bad(format!(
                "retention must lie in (0, 1), got {}",
                self.retention
            ));
        }
        Ok(())
    }
}

/// Which target terms of the loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_ce_term: bool,
    pub use_kl_term: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_ce_term: true,
        use_kl_term: true,
    };
    pub const SOURCE_ONLY: Ablation = Ablation {
        use_ce_term: false,
        use_kl_term: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub label: usize,
    pub confidence: f64,
}

/// Argmax with lowest-index tie-break; confidence is the max probability.
pub fn pseudolabel(p: &ProbVector) -> PseudoLabel {
    let (label, confidence) = p.argmax();
    PseudoLabel { label, confidence }
}

/// One minibatch of the three loss terms. Any part may be empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBatch<'a> {
    pub source: &'a [(&'a [f64], usize)],
    pub target_known: &'a [(&'a [f64], PseudoLabel)],
    pub target_unknown: &'a [&'a [f64]],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: Temperature,
}

impl LossWeights {
    pub fn new(hp: &Hyperparams, ablation: Ablation) -> Self {
        Self {
            alpha: if ablation.use_ce_term { hp.alpha } else { 0.0 },
            beta: if ablation.use_kl_term { hp.beta } else { 0.0 },
            temperature: hp.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// The unweighted source cross-entropy term.
    pub source_ce: f64,
    pub gradient: Vec<f64>,
}

/// Adds `coef * dl_df[k] * z` into block `k` of the cotangent.
fn accumulate(cotangent: &mut [f64], z: &[f64], dl_df: &[f64], coef: f64) {
    let dim = z.len();
    for (k, g) in dl_df.iter().enumerate() {
        let scale = coef * g;
        if scale == 0.0 {
            continue;
        }
        for (c, zi) in cotangent[k * dim..(k + 1) * dim].iter_mut().zip(z) {
            *c += scale * zi;
        }
    }
}

struct Logits {
    scaled: Vec<f64>,
    probs: Vec<f64>,
    lse: f64,
}

fn logits(v: &ClassEmbeddings, z: &[f64], t: Temperature) -> Result<Logits> {
    let scaled: Vec<f64> = v
        .similarities(z)?
        .into_iter()
        .map(|f| f / t.value())
        .collect();
    let lse = logsumexp(&scaled);
    let probs = scaled.iter().map(|g| (g - lse).exp()).collect();
    Ok(Logits { scaled, probs, lse })
}

/// Cross-entropy `-log p_y` and its gradient with respect to the raw
/// similarities, `(p - onehot(y)) / t`.
fn cross_entropy(l: &Logits, label: usize, t: Temperature) -> (f64, Vec<f64>) {
    let loss = l.lse - l.scaled[label];
    let grad = l
        .probs
        .iter()
        .enumerate()
        .map(|(k, p)| (p - if k == label { 1.0 } else { 0.0 }) / t.value())
        .collect();
    (loss, grad)
}

/// The full adaptation loss and its exact gradient with respect to `w`.
///
/// Batch terms are means; the confidence weight on the pseudolabelled term
/// is treated as a constant. A term whose weight is zero is skipped entirely,
/// so its inputs cannot influence the result.
pub fn total_loss(
    batch: &LossBatch<'_>,
    w: &PromptState,
    encoder: &dyn PromptEncoder,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let k = encoder.num_classes();
    let dim = encoder.feature_dim();
    let t = weights.temperature;
    let v = encoder.encode(w)?;
    let mut cotangent = vec![0.0; encoder.output_dim()];
    let check = |z: &[f64], label: Option<usize>| -> Result<()> {
        check_dim("feature vector", dim, z.len())?;
        match label {
            Some(l) if l >= k => Err(invalid(format!(
                "class index {l} out of range for {k} classes"
            ))),
            _ => Ok(()),
        }
    };

    let mut source_ce = 0.0;
    if !batch.source.is_empty() {
        let coef = 1.0 / batch.source.len() as f64;
        for &(z, label) in batch.source {
            check(z, Some(label))?;
            let l = logits(&v, z, t)?;
            let (ce, grad) = cross_entropy(&l, label, t);
            source_ce += ce;
            accumulate(&mut cotangent, z, &grad, coef);
        }
        source_ce *= coef;
    }
    let mut loss = source_ce;

    if weights.alpha != 0.0 && !batch.target_known.is_empty() {
        let coef = weights.alpha / batch.target_known.len() as f64;
        let mut term = 0.0;
        for &(z, pl) in batch.target_known {
            check(z, Some(pl.label))?;
            let l = logits(&v, z, t)?;
            let (ce, grad) = cross_entropy(&l, pl.label, t);
            term += pl.confidence * ce;
            accumulate(&mut cotangent, z, &grad, coef * pl.confidence);
        }
        loss += coef * term;
    }

    if weights.beta != 0.0 && !batch.target_unknown.is_empty() {
        let coef = weights.beta / batch.target_unknown.len() as f64;
        let uniform = 1.0 / k as f64;
        let mut term = 0.0;
        for &z in batch.target_unknown {
            check(z, None)?;
            let l = logits(&v, z, t)?;
            term += kl_uniform_from_logits(&l.scaled);
            let grad: Vec<f64> = l.probs.iter().map(|p| (p - uniform) / t.value()).collect();
            accumulate(&mut cotangent, z, &grad, coef);
        }
        loss += coef * term;
    }

    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {loss}")));
    }
    Ok(LossOutput {
        loss,
        source_ce,
        gradient: encoder.vjp(w, &cotangent)?,
    })
}

/// Plain SGD, no momentum or weight decay.
pub fn sgd_step(w: &mut PromptState, gradient: &[f64], lr: f64) {
    for (wi, gi) in w.as_mut_slice().iter_mut().zip(gradient) {
        *wi -= lr * gi;
    }
}

/// Constant warm-up rate for the first epoch, then cosine annealing from
/// `hp.lr` over the remaining steps.
pub fn lr_schedule(step: usize, total_steps: usize, hp: &Hyperparams) -> f64 {
    let warmup_steps = total_steps / hp.epochs.max(1);
    if step < warmup_steps {
        return hp.warmup_lr;
    }
    let decay_steps = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    hp.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradient-norm scores of a sample set under the KL probe loss.
pub fn gradient_scores(
    samples: &[Sample],
    w: &PromptState,
    encoder: &dyn PromptEncoder,
    t: Temperature,
) -> Result<Vec<(f64, ProbVector)>> {
    let v = encoder.encode(w)?;
    let jac = DenseJacobian::compute(encoder, w)?;
    samples
        .iter()
        .map(|s| {
            let p = temp_softmax(&v.similarities(&s.feature)?, t)?;
            let g = prompt_gradient(&s.feature, &p, &jac, t)?;
            Ok((grad_l2_score(&g), p))
        })
        .collect()
}

/// Maximum-softmax evaluation of labelled target samples against fixed class
/// embeddings.
pub fn evaluate_msp(
    samples: &[Sample],
    class_embeddings: &ClassEmbeddings,
    t: Temperature,
) -> Result<MetricTriple> {
    let scored = samples
        .iter()
        .map(|s| {
            let f = class_embeddings.similarities(&s.feature)?;
            let score = msp_score(&f, t)?;
            Ok(match s.class {
                Some(c) => {
                    let predicted = temp_softmax(&f, t)?.argmax().0;
                    ScoredSample::known(score, predicted == c)
                }
                None => ScoredSample::unknown(score),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&scored)
}

/// Mean cross-entropy of labelled samples against fixed class embeddings.
pub fn source_cross_entropy(
    samples: &[Sample],
    labels: &[usize],
    class_embeddings: &ClassEmbeddings,
    t: Temperature,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, &y) in samples.iter().zip(labels) {
        let l = logits(class_embeddings, &s.feature, t)?;
        total += cross_entropy(&l, y, t).0;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the per-step batch losses.
    pub mean_loss: f64,
    /// Cross-entropy over the whole source set after the epoch's updates.
    pub source_ce: f64,
    pub threshold: f64,
    pub known: usize,
    pub unknown: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub prompt: PromptState,
    pub metrics: MetricTriple,
    /// Threshold from the final epoch's calibration.
    pub threshold: Threshold,
    pub log: Vec<EpochLog>,
}

/// Runs the full adaptation loop and evaluates the final prompt with MSP.
///
/// Target labels are read only by the final evaluation.
pub fn run_adaptation(
    source: &[Sample],
    target: &[Sample],
    encoder: &dyn PromptEncoder,
    hp: &Hyperparams,
    ablation: Ablation,
) -> Result<AdaptationOutcome> {
    hp.validate()?;
    if source.is_empty() {
        return Err(invalid("source set is empty"));
    }
    let source_labels = source
        .iter()
        .map(|s| {
            s.class
                .ok_or_else(|| invalid(format!("source sample {} has no class", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let t = hp.temperature;
    let weights = LossWeights::new(hp, ablation);
    let mut w = PromptState::init(encoder.num_params(), hp.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);

    let steps_per_epoch = source.len().div_ceil(hp.batch_size);
    let total_steps = steps_per_epoch * hp.epochs;
    let target_batch = target.len().div_ceil(steps_per_epoch).max(1);

    let mut log = Vec::with_capacity(hp.epochs);
    let mut threshold = None;
    let mut source_order: Vec<usize> = (0..source.len()).collect();
    let mut target_order: Vec<usize> = (0..target.len()).collect();

    for epoch in 0..hp.epochs {
        let source_scores: Vec<f64> = gradient_scores(source, &w, encoder, t)?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let th = calibrate_threshold(
            &source_scores,
            hp.retention,
            ScoreConvention::HigherIsUnknown,
        )?;
        // Per target sample: Some(pseudolabel) if separated as known.
        let assignment: Vec<Option<PseudoLabel>> = gradient_scores(target, &w, encoder, t)?
            .into_iter()
            .map(|(score, p)| (!th.is_unknown(score)).then(|| pseudolabel(&p)))
            .collect();
        let known = assignment.iter().filter(|a| a.is_some()).count();

        source_order.shuffle(&mut rng);
        target_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let first_lr = lr_schedule(epoch * steps_per_epoch, total_steps, hp);
        for step in 0..steps_per_epoch {
            let src: Vec<(&[f64], usize)> = source_order
                .iter()
                .skip(step * hp.batch_size)
                .take(hp.batch_size)
                .map(|&i| (source[i].feature.as_slice(), source_labels[i]))
                .collect();
            let mut tk = Vec::new();
            let mut tu = Vec::new();
            for &i in target_order
                .iter()
                .skip(step * target_batch)
                .take(target_batch)
            {
                let z = target[i].feature.as_slice();
                match assignment[i] {
                    Some(pl) => tk.push((z, pl)),
                    None => tu.push(z),
                }
            }
            let batch = LossBatch {
                source: &src,
                target_known: &tk,
                target_unknown: &tu,
            };
            let out = total_loss(&batch, &w, encoder, &weights)?;
            let lr = lr_schedule(epoch * steps_per_epoch + step, total_steps, hp);
            sgd_step(&mut w, &out.gradient, lr);
            if w.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "prompt diverged at epoch {epoch}"
                )));
            }
            loss_sum += out.loss;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            source_ce: source_cross_entropy(source, &source_labels, &encoder.encode(&w)?, t)?,
            threshold: th.value,
            known,
            unknown: target.len() - known,
            lr: first_lr,
        });
        threshold = Some(th);
    }

    let metrics = evaluate_msp(target, &encoder.encode(&w)?, t)?;
    Ok(AdaptationOutcome {
        prompt: w,
        metrics,
        threshold: threshold.expect("at least one epoch"),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ClassContext, LinearEncoder};

    #[test]
    fn pseudolabel_examples() {
        let pl = pseudolabel(&ProbVector::new(vec![0.1, 0.7, 0.2]).unwrap());
        assert_eq!(pl.label, 1);
        assert_eq!(pl.confidence, 0.7);
        let pl = pseudolabel(&ProbVector::uniform(4).unwrap());
        assert_eq!((pl.label, pl.confidence), (0, 0.25));
        let f = [0.3, -0.1, 0.8, 0.2];
        for t in [0.01, 0.5, 3.0] {
            let p = temp_softmax(&f, Temperature::new(t).unwrap()).unwrap();
            assert_eq!(pseudolabel(&p).label, 2);
        }
    }

    #[test]
    fn schedule_examples() {
        let hp = Hyperparams::default();
        let total = 50;
        for step in 0..10 {
            assert_eq!(lr_schedule(step, total, &hp), 1e-5);
        }
        assert!((lr_schedule(10, total, &hp) - 1e-4).abs() < 1e-12);
        let last = lr_schedule(total - 1, total, &hp);
        let expected = 1e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 39.0 / 40.0).cos());
        assert!((last - expected).abs() < 1e-18);
        for step in 11..total {
            assert!(lr_schedule(step, total, &hp) < lr_schedule(step - 1, total, &hp));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_prompt_unchanged() {
        let mut w = PromptState::init(8, 3);
        let before = w.clone();
        sgd_step(
            &mut w,
            &[1.0, -2.0, 3.0, 1e300, -1e-300, 0.0, 5.0, 6.0],
            0.0,
        );
        let bits = |p: &PromptState| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w), bits(&before));
    }

    #[test]
    fn empty_target_batches_reduce_to_source_ce() {
        let ctx = ClassContext::random(3, 4, 1).unwrap();
        let enc = LinearEncoder::from_context(&ctx, 6);
        let w = PromptState::init(6, 2);
        let z = [0.5, 0.5, 0.5, 0.5];
        let src = [(&z[..], 1usize)];
        let hp = Hyperparams {
            temperature: Temperature::new(0.5).unwrap(),
            ..Hyperparams::default()
        };
        let out = total_loss(
            &LossBatch {
                source: &src,
                ..LossBatch::default()
            },
            &w,
            &enc,
            &LossWeights::new(&hp, Ablation::FULL),
        )
        .unwrap();
        assert_eq!(out.loss, out.source_ce);
        let v = enc.encode(&w).unwrap();
        let f = v.similarities(&z).unwrap();
        let p = temp_softmax(&f, hp.temperature).unwrap();
        assert!((out.loss + p.as_slice()[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_unknown_sample_adds_nothing() {
        // Identity encoder with w = 0 gives v_k = 0 for all classes, so every
        // logit is 0 and p is exactly uniform.
        let enc = LinearEncoder::identity(3, 2);
        let w = PromptState::zeros(2);
        let z = [0.6, 0.8];
        let unknown = [&z[..]];
        let out = total_loss(
            &LossBatch {
                target_unknown: &unknown,
                ..LossBatch::default()
            },
            &w,
            &enc,
            &LossWeights::new(&Hyperparams::default(), Ablation::FULL),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let enc = LinearEncoder::identity(2, 2);
        let z = [1.0, 0.0];
        let src = [(&z[..], 2usize)];
        let err = total_loss(
            &LossBatch {
                source: &src,
                ..LossBatch::default()
            },
            &PromptState::zeros(2),
            &enc,
            &LossWeights::new(&Hyperparams::default(), Ablation::FULL),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn empty_source_is_rejected() {
        let enc = LinearEncoder::identity(2, 2);
        let hp = Hyperparams::default();
        assert!(run_adaptation(&[], &[], &enc, &hp, Ablation::FULL).is_err());
    }
}
