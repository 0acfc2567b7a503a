//! Numerical kernels: temperature-scaled softmax, the KL-to-uniform probe
//! loss and its derivatives, the prompt-space gradient, and scalar OOD scores.
//!
//! Score conventions differ between functions and are stated on each one:
//!
//! | Function | Higher means |
//! |----------|--------------|
//! | [`grad_l2_score`] | more likely unknown |
//! | [`gradnorm_l1_baseline`] | more likely known |
//! | [`energy_score`] | more likely unknown |
//! | [`msp_score`] | more likely known |
//!
//! All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::{l1_norm, l2_norm, Matrix};

/// Floor applied to probabilities before taking a log or a reciprocal.
pub const PROB_FLOOR: f64 = 1e-12;

const PROB_SUM_TOL: f64 = 1e-9;

/// Logit divisor: `logits = similarities / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    /// Matches the conventional pretrained logit scale of 100.
    pub const DEFAULT: Temperature = Temperature(0.01);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(invalid(format!(
                "temperature must be positive, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = crate::Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// A validated probability vector over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid(format!(
                "probability vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("probability entry {bad} out of range")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index and value of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(f: &[f64]) -> Result<()> {
    if f.len() < 2 {
        return Err(invalid(format!("need at least 2 logits, got {}", f.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite logit"));
    }
    Ok(())
}

/// `log(sum(exp(x)))`, stabilised by max-subtraction.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `softmax(f / t)`.
pub fn temp_softmax(f: &[f64], t: Temperature) -> Result<ProbVector> {
    check_logits(f)?;
    let scaled: Vec<f64> = f.iter().map(|v| v / t.value()).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// `D_KL(u || p) = (1/K) * sum(-log p_i) - log K`, with `p_i` floored at
/// [`PROB_FLOOR`].
pub fn kl_uniform(p: &ProbVector) -> f64 {
    let k = p.len() as f64;
    let neg_log_mean = p
        .as_slice()
        .iter()
        .map(|&pi| -pi.max(PROB_FLOOR).ln())
        .sum::<f64>()
        / k;
    neg_log_mean - k.ln()
}

/// The same quantity as [`kl_uniform`] evaluated directly on logits `g`
/// (`p = softmax(g)`): `logsumexp(g) - mean(g) - log K`. No floor is needed.
pub fn kl_uniform_from_logits(g: &[f64]) -> f64 {
    let k = g.len() as f64;
    logsumexp(g) - g.iter().sum::<f64>() / k - k.ln()
}

/// Shannon entropy `-sum(p_i log p_i)` in nats.
pub fn entropy_score(p: &ProbVector) -> f64 {
    -p.as_slice()
        .iter()
        .map(|&pi| pi * pi.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// `diag(p) - p p^T`, the Jacobian of softmax at its output `p`.
pub fn softmax_jacobian(p: &ProbVector) -> Matrix {
    let p = p.as_slice();
    let k = p.len();
    let mut m = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let diag = if i == j { p[i] } else { 0.0 };
            m.set(i, j, diag - p[i] * p[j]);
        }
    }
    m
}

/// Gradient of [`kl_uniform`] with respect to `p`: `-1 / (K p_i)`.
pub fn kl_grad_wrt_probs(p: &ProbVector) -> Vec<f64> {
    let k = p.len() as f64;
    p.as_slice()
        .iter()
        .map(|&pi| -1.0 / (k * pi.max(PROB_FLOOR)))
        .collect()
}

/// Closed form of the KL gradient with respect to the logits: `p - u`.
pub fn kl_grad_wrt_logits(p: &ProbVector) -> Vec<f64> {
    let u = 1.0 / p.len() as f64;
    p.as_slice().iter().map(|&pi| pi - u).collect()
}

/// The same gradient assembled by the chain rule,
/// `softmax_jacobian(p)^T * kl_grad_wrt_probs(p)`.
pub fn kl_grad_wrt_logits_chain(p: &ProbVector) -> Vec<f64> {
    softmax_jacobian(p).matvec_t(&kl_grad_wrt_probs(p))
}

/// A linear map `c -> J^T c` for the Jacobian `J = dv/dw` of the class
/// embeddings with respect to the prompt parameters.
pub trait VjpProvider {
    /// Length `d` of the cotangent (flattened class embeddings).
    fn output_dim(&self) -> usize;
    /// Length `n` of the prompt parameter vector.
    fn param_dim(&self) -> usize;
    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>>;
}

fn check_gradient_inputs(z: &[f64], p: &ProbVector, vjp: &impl VjpProvider) -> Result<()> {
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(invalid("feature vector must be non-empty and finite"));
    }
    check_dim(
        "class embeddings (K * feature_dim)",
        p.len() * z.len(),
        vjp.output_dim(),
    )
}

/// Gradient of the KL-to-uniform probe loss with respect to the prompt vector:
/// `(1/t) * J^T * blockdiag(z, ..., z) * (p - u)`.
///
/// `p` must be `temp_softmax` of the inner products of `z` with the class
/// embeddings at the point where `vjp` was linearised.
pub fn prompt_gradient(
    z: &[f64],
    p: &ProbVector,
    vjp: &impl VjpProvider,
    t: Temperature,
) -> Result<Vec<f64>> {
    check_gradient_inputs(z, p, vjp)?;
    let inv_t = 1.0 / t.value();
    let delta = kl_grad_wrt_logits(p);
    let mut cotangent = Vec::with_capacity(vjp.output_dim());
    for dk in delta {
        let scale = dk * inv_t;
        cotangent.extend(z.iter().map(|zi| zi * scale));
    }
    vjp.vjp(&cotangent)
}

/// Reference path for [`prompt_gradient`] that multiplies out every factor of
/// the chain rule explicitly: `dl/dp`, the softmax Jacobian (with the `1/t`
/// logit scale), the dense `K x d` matrix `df/dv`, then the encoder vjp.
pub fn prompt_gradient_chain_rule(
    z: &[f64],
    p: &ProbVector,
    vjp: &impl VjpProvider,
    t: Temperature,
) -> Result<Vec<f64>> {
    check_gradient_inputs(z, p, vjp)?;
    let k = p.len();
    let dim = z.len();
    let dl_dp = kl_grad_wrt_probs(p);
    let dl_df: Vec<f64> = softmax_jacobian(p)
        .matvec_t(&dl_dp)
        .into_iter()
        .map(|g| g / t.value())
        .collect();
    let mut df_dv = Matrix::zeros(k, k * dim);
    for c in 0..k {
        df_dv.row_mut(c)[c * dim..(c + 1) * dim].copy_from_slice(z);
    }
    vjp.vjp(&df_dv.matvec_t(&dl_df))
}

/// L2 norm of a prompt gradient. Higher means more likely unknown.
pub fn grad_l2_score(gradient: &[f64]) -> f64 {
    l2_norm(gradient)
}

/// L1 norm of the KL gradient with respect to a fully connected head
/// (weights plus bias) acting on `z`: `||p - u||_1 * (||z||_1 + 1)`.
/// Higher means more likely known.
pub fn gradnorm_l1_baseline(z: &[f64], p: &ProbVector) -> f64 {
    l1_norm(&kl_grad_wrt_logits(p)) * (l1_norm(z) + 1.0)
}

/// `-t * logsumexp(f / t)`. Higher means more likely unknown.
pub fn energy_score(f: &[f64], t: Temperature) -> Result<f64> {
    check_logits(f)?;
    let scaled: Vec<f64> = f.iter().map(|v| v / t.value()).collect();
    Ok(-t.value() * logsumexp(&scaled))
}

/// Maximum softmax probability at temperature `t`. Higher means more likely
/// known.
pub fn msp_score(f: &[f64], t: Temperature) -> Result<f64> {
    Ok(temp_softmax(f, t)?.argmax().1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ONE: Temperature = Temperature(1.0);

    fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        temp_softmax(&g, ONE).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = temp_softmax(&[0.0, 0.0, 0.0], ONE).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = temp_softmax(&[1.0, 0.0], ONE).unwrap();
        assert!((p.as_slice()[0] - 0.731059).abs() < 1e-6);
        assert!((p.as_slice()[1] - 0.268941).abs() < 1e-6);

        let t = Temperature::new(0.7).unwrap();
        let a = temp_softmax(&[0.0, 0.3, -1.2], t).unwrap();
        let b = temp_softmax(&[5.0, 5.3, 3.8], t).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(temp_softmax(&[0.0, f64::NAN], ONE).is_err());
        assert!(temp_softmax(&[f64::INFINITY, 0.0], ONE).is_err());
        assert!(temp_softmax(&[1.0], ONE).is_err());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = temp_softmax(&[1.0, -1.0, 0.5], Temperature::new(1e-4).unwrap()).unwrap();
        assert_eq!(p.as_slice()[0], 1.0);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn kl_uniform_examples() {
        for k in 2..10 {
            assert!(kl_uniform(&ProbVector::uniform(k).unwrap()).abs() < 1e-12);
        }
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        assert!((kl_uniform(&p) - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_uniform_matches_logit_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.random_range(2..12);
            let g: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let lse = logsumexp(&g);
            let mean = g.iter().sum::<f64>() / k as f64;
            let expected = lse - mean - (k as f64).ln();
            let p = temp_softmax(&g, ONE).unwrap();
            assert!((kl_uniform(&p) - expected).abs() < 1e-12);
            assert!((kl_uniform_from_logits(&g) - expected).abs() < 1e-12);
            assert!(kl_uniform(&p) >= 0.0);
        }
    }

    #[test]
    fn entropy_examples() {
        let p = ProbVector::uniform(4).unwrap();
        assert!((entropy_score(&p) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy_score(&p) - 1.386294).abs() < 1e-6);
        let onehot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(entropy_score(&onehot).abs() < 1e-9);
    }

    #[test]
    fn jacobian_examples() {
        let j = softmax_jacobian(&ProbVector::new(vec![0.5, 0.5]).unwrap());
        assert_eq!(j.as_slice(), &[0.25, -0.25, -0.25, 0.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 2..9 {
            let p = random_probs(&mut rng, k);
            let row_sums = softmax_jacobian(&p).matvec(&vec![1.0; k]);
            assert!(row_sums.iter().all(|s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 5;
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = temp_softmax(&g, ONE).unwrap();
        let analytic = softmax_jacobian(&p);
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..k {
            let mut plus = g.clone();
            let mut minus = g.clone();
            plus[j] += h;
            minus[j] -= h;
            let pp = temp_softmax(&plus, ONE).unwrap();
            let pm = temp_softmax(&minus, ONE).unwrap();
            for i in 0..k {
                let fd = (pp.as_slice()[i] - pm.as_slice()[i]) / (2.0 * h);
                num += (fd - analytic.get(i, j)).powi(2);
                den += analytic.get(i, j).powi(2);
            }
        }
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn kl_logit_gradient_examples() {
        assert!(kl_grad_wrt_logits(&ProbVector::uniform(6).unwrap())
            .iter()
            .all(|v| *v == 0.0));
        let p = ProbVector::new(vec![0.99, 0.005, 0.005]).unwrap();
        let g = kl_grad_wrt_logits(&p);
        let expected = [0.656667, -0.328333, -0.328333];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_logit_gradient_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let k = rng.random_range(2..66);
            let p = random_probs(&mut rng, k);
            let closed = kl_grad_wrt_logits(&p);
            let chain = kl_grad_wrt_logits_chain(&p);
            assert!(closed.iter().sum::<f64>().abs() < 1e-12);
            for (a, b) in closed.iter().zip(&chain) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradnorm_baseline_examples() {
        let z = [0.6, -0.8];
        assert_eq!(
            gradnorm_l1_baseline(&z, &ProbVector::uniform(2).unwrap()),
            0.0
        );
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let z = [0.25, 0.75];
        assert!((gradnorm_l1_baseline(&z, &p) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gradnorm_baseline_matches_explicit_fc_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(2..10);
            let dim = rng.random_range(1..20);
            let p = random_probs(&mut rng, k);
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta = kl_grad_wrt_logits(&p);
            // [(p - u) z^T | (p - u)]
            let mut entries = Vec::new();
            for d in &delta {
                entries.extend(z.iter().map(|zi| d * zi));
                entries.push(*d);
            }
            let oracle: f64 = entries.iter().map(|v| v.abs()).sum();
            assert!((gradnorm_l1_baseline(&z, &p) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_examples() {
        for k in 2..7 {
            let f = vec![0.0; k];
            assert!((energy_score(&f, ONE).unwrap() + (k as f64).ln()).abs() < 1e-12);
        }
        assert!((energy_score(&[2.0, 0.0], ONE).unwrap() + 2.126928).abs() < 1e-6);
    }

    #[test]
    fn energy_kl_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let k = rng.random_range(2..20);
            // Keep logit gaps small enough that no probability reaches the floor.
            let t = Temperature::new(rng.random_range(0.2..3.0)).unwrap();
            let f: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = temp_softmax(&f, t).unwrap();
            let mean = f.iter().sum::<f64>() / k as f64;
            let rhs =
                -energy_score(&f, t).unwrap() / t.value() - mean / t.value() - (k as f64).ln();
            assert!((kl_uniform(&p) - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn msp_examples() {
        assert_eq!(msp_score(&[0.0; 4], ONE).unwrap(), 0.25);
        assert!((msp_score(&[1.0, 0.0], ONE).unwrap() - 0.731059).abs() < 1e-6);
        let a = msp_score(&[0.2, 0.1, -0.4], ONE).unwrap();
        let b = msp_score(&[3.2, 3.1, 2.6], ONE).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let p = ProbVector::uniform(4).unwrap();
        assert_eq!(p.argmax(), (0, 0.25));
    }
}
