//! Built-in self-verification: every analytic quantity is compared against
//! an independent reference (finite differences, brute-force sweeps, or a
//! second derivation path) on seeded random inputs.

use gradsep_core::encoder::{
    ClassContext, EncoderAt, EncoderKind, LinearEncoder, PromptEncoder, PromptState,
};
use gradsep_core::linalg::Matrix;
use gradsep_core::math::{
    kl_grad_wrt_logits, kl_grad_wrt_logits_chain, kl_uniform, kl_uniform_from_logits, logsumexp,
    prompt_gradient, prompt_gradient_chain_rule, softmax_jacobian, temp_softmax, Temperature,
};
use gradsep_core::metrics::{auroc, ccr_at_fpr, fpr_at_tpr, ScoredSample};
use gradsep_core::separation::{calibrate_threshold, ScoreConvention};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = uniform_vec(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Tracks the worst observed error against a tolerance.
struct Worst {
    name: &'static str,
    tol: f64,
    worst: f64,
    cases: usize,
}

impl Worst {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            worst: 0.0,
            cases: 0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            passed: self.worst <= self.tol,
            detail: format!(
                "worst error {:.3e} over {} cases (tolerance {:.0e})",
                self.worst, self.cases, self.tol
            ),
        }
    }
}

/// Random encoder of either kind with `K <= 8`, `feature_dim <= 16`.
fn random_encoder(rng: &mut ChaCha8Rng, kind: EncoderKind) -> (Box<dyn PromptEncoder>, usize) {
    let k = rng.random_range(2..=8);
    let dim = rng.random_range(2..=16);
    let ctx = ClassContext::random(k, dim, rng.random()).expect("valid context");
    let tokens = rng.random_range(1..=4);
    let token_dim = rng.random_range(2..=4);
    (
        kind.build(&ctx, tokens, token_dim).expect("valid encoder"),
        dim,
    )
}

fn probe_loss(encoder: &dyn PromptEncoder, w: &PromptState, z: &[f64], t: Temperature) -> f64 {
    let v = encoder.encode(w).expect("encode");
    let logits: Vec<f64> = v
        .similarities(z)
        .expect("dims")
        .iter()
        .map(|f| f / t.value())
        .collect();
    kl_uniform_from_logits(&logits)
}

fn check_gradient_fd(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut w = Worst::new("prompt gradient matches finite differences", 1e-6);
    let h = 1e-5;
    for i in 0..cases {
        let kind = if i % 2 == 0 {
            EncoderKind::Linear
        } else {
            EncoderKind::Attention
        };
        let (enc, dim) = random_encoder(rng, kind);
        let t = Temperature::new(rng.random_range(0.5..2.0)).expect("positive");
        let prompt = PromptState::new(uniform_vec(rng, enc.num_params(), 1.0)).expect("finite");
        let z = unit_vec(rng, dim);
        let p = temp_softmax(&enc.encode(&prompt).unwrap().similarities(&z).unwrap(), t).unwrap();
        let analytic = prompt_gradient(&z, &p, &EncoderAt::new(enc.as_ref(), &prompt), t).unwrap();
        let fd: Vec<f64> = (0..enc.num_params())
            .map(|j| {
                let mut plus = prompt.clone();
                plus.as_mut_slice()[j] += h;
                let mut minus = prompt.clone();
                minus.as_mut_slice()[j] -= h;
                (probe_loss(enc.as_ref(), &plus, &z, t) - probe_loss(enc.as_ref(), &minus, &z, t))
                    / (2.0 * h)
            })
            .collect();
        w.record(rel_l2(&analytic, &fd));
    }
    w.finish()
}

fn check_chain_rule(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut w = Worst::new("closed-form gradient equals explicit chain rule", 1e-12);
    for i in 0..cases {
        let k = rng.random_range(2..=8);
        let logits = uniform_vec(rng, k, 3.0);
        let p = temp_softmax(&logits, Temperature::new(1.0).unwrap()).unwrap();
        w.record(max_abs_diff(
            &kl_grad_wrt_logits(&p),
            &kl_grad_wrt_logits_chain(&p),
        ));
        let kind = if i % 2 == 0 {
            EncoderKind::Linear
        } else {
            EncoderKind::Attention
        };
        let (enc, dim) = random_encoder(rng, kind);
        let t = Temperature::new(rng.random_range(0.5..2.0)).unwrap();
        let prompt = PromptState::new(uniform_vec(rng, enc.num_params(), 1.0)).unwrap();
        let z = unit_vec(rng, dim);
        let p = temp_softmax(&enc.encode(&prompt).unwrap().similarities(&z).unwrap(), t).unwrap();
        let at = EncoderAt::new(enc.as_ref(), &prompt);
        let a = prompt_gradient(&z, &p, &at, t).unwrap();
        let b = prompt_gradient_chain_rule(&z, &p, &at, t).unwrap();
        w.record(max_abs_diff(&a, &b));
    }
    w.finish()
}

fn check_identity_norm_law(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut w = Worst::new("identity-Jacobian gradient norm law", 1e-12);
    for _ in 0..cases {
        let k = rng.random_range(2..=8);
        let dim = rng.random_range(2..=16);
        let d = k * dim;
        let enc = LinearEncoder::new(k, dim, Matrix::identity(d), vec![0.0; d]).unwrap();
        let t = Temperature::new(rng.random_range(0.5..2.0)).unwrap();
        let z = unit_vec(rng, dim);
        let p = temp_softmax(&uniform_vec(rng, k, 2.0), t).unwrap();
        let prompt = PromptState::zeros(d);
        let g = prompt_gradient(&z, &p, &EncoderAt::new(&enc, &prompt), t).unwrap();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pu = kl_grad_wrt_logits(&p);
        let expected = pu.iter().map(|x| x * x).sum::<f64>().sqrt() / t.value();
        w.record((norm - expected).abs());
    }
    w.finish()
}

fn check_jacobian_fd(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut w = Worst::new("softmax Jacobian matches finite differences", 1e-6);
    let one = Temperature::new(1.0).unwrap();
    let h = 1e-6;
    for _ in 0..cases {
        let k = 5;
        let f = uniform_vec(rng, k, 2.0);
        let p = temp_softmax(&f, one).unwrap();
        let jac = softmax_jacobian(&p);
        let mut analytic = Vec::with_capacity(k * k);
        let mut fd = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                let mut plus = f.clone();
                plus[j] += h;
                let mut minus = f.clone();
                minus[j] -= h;
                let dp = (temp_softmax(&plus, one).unwrap().as_slice()[i]
                    - temp_softmax(&minus, one).unwrap().as_slice()[i])
                    / (2.0 * h);
                analytic.push(jac.get(i, j));
                fd.push(dp);
            }
        }
        w.record(rel_l2(&analytic, &fd));
    }
    w.finish()
}

fn check_kl_energy(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut w = Worst::new("KL-to-uniform equals logsumexp minus mean logit", 1e-10);
    for _ in 0..cases {
        let k = rng.random_range(2..=10);
        let g = uniform_vec(rng, k, 3.0);
        let p = temp_softmax(&g, Temperature::new(1.0).unwrap()).unwrap();
        let mean = g.iter().sum::<f64>() / k as f64;
        w.record((kl_uniform(&p) - (logsumexp(&g) - mean - (k as f64).ln())).abs());
    }
    w.finish()
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Coarse grid so ties occur.
    (0..n)
        .map(|_| f64::from(rng.random_range(0..20u32)) / 4.0)
        .collect()
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in id {
        for b in ood {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn candidate_thresholds(scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut t: Vec<f64> = scores.chain([f64::INFINITY]).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn brute_fpr(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let best = candidate_thresholds(id.iter().chain(ood).copied())
        .into_iter()
        .filter(|&t| id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64 >= tpr)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
}

fn brute_ccr(samples: &[ScoredSample], fpr: f64) -> f64 {
    let m = samples.iter().filter(|s| !s.is_id).count() as f64;
    let n = samples.iter().filter(|s| s.is_id).count() as f64;
    let best = candidate_thresholds(samples.iter().map(|s| s.score))
        .into_iter()
        .filter(|&t| samples.iter().filter(|s| !s.is_id && s.score >= t).count() as f64 / m <= fpr)
        .fold(f64::INFINITY, f64::min);
    samples
        .iter()
        .filter(|s| s.is_id && s.pred_correct && s.score >= best)
        .count() as f64
        / n
}

fn check_metrics(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=60);
        let m = rng.random_range(1..=60);
        let id = random_scores(rng, n);
        let ood = random_scores(rng, m);
        if auroc(&id, &ood).unwrap() != brute_auroc(&id, &ood) {
            mismatches += 1;
        }
        let tpr = rng.random_range(0.05..1.0);
        if fpr_at_tpr(&id, &ood, tpr).unwrap() != brute_fpr(&id, &ood, tpr) {
            mismatches += 1;
        }
        let mut samples: Vec<ScoredSample> = id
            .iter()
            .map(|&s| ScoredSample::known(s, rng.random_bool(0.7)))
            .collect();
        samples.extend(ood.iter().map(|&s| ScoredSample::unknown(s)));
        let fpr = rng.random_range(0.0..0.5);
        if ccr_at_fpr(&samples, fpr).unwrap() != brute_ccr(&samples, fpr) {
            mismatches += 1;
        }
    }
    CheckOutcome {
        name: "metrics equal brute-force threshold sweeps",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches over {} comparisons", 3 * cases),
    }
}

fn check_calibration(rng: &mut ChaCha8Rng, cases: usize) -> CheckOutcome {
    let mut violations = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=200);
        let scores = random_scores(rng, n);
        let th = calibrate_threshold(&scores, 0.9, ScoreConvention::HigherIsUnknown).unwrap();
        let kept = scores.iter().filter(|&&s| !th.is_unknown(s)).count();
        if (kept as f64) < 0.9 * scores.len() as f64 {
            violations += 1;
        }
    }
    CheckOutcome {
        name: "calibrated threshold keeps at least 90% of source as known",
        passed: violations == 0,
        detail: format!("{violations} violations over {cases} score sets"),
    }
}

/// Runs every check. `cases` scales the number of random cases per check.
pub fn run_checks(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_jacobian_fd(&mut rng, cases),
        check_chain_rule(&mut rng, cases),
        check_gradient_fd(&mut rng, cases),
        check_identity_norm_law(&mut rng, cases),
        check_kl_energy(&mut rng, 10 * cases),
        check_metrics(&mut rng, cases),
        check_calibration(&mut rng, 10 * cases),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for outcome in run_checks(7, 20) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn brute_ccr_agrees_on_hand_example() {
        let mut samples: Vec<ScoredSample> =
            (1..=10).map(|i| ScoredSample::unknown(i as f64)).collect();
        samples.extend([5.5, 9.5, 10.5].map(|s| ScoredSample::known(s, true)));
        assert_eq!(brute_ccr(&samples, 0.10), 2.0 / 3.0);
    }
}
