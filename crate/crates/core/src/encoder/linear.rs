use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_prompt, ClassContext, ClassEmbeddings, PromptEncoder, PromptState};
use crate::error::{check_dim, Result};
use crate::linalg::Matrix;

const LINEAR_SEED_SALT: u64 = 0x4c49_4e45_4152;

/// `v_k = A_k w + b_k` with no output normalisation, so that the inner
/// product logits are exactly `z . v_k` and the Jacobian is the constant
/// stacked matrix `[A_1; ...; A_K]`.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    num_classes: usize,
    feature_dim: usize,
    weights: Matrix,
    bias: Vec<f64>,
}

impl LinearEncoder {
    /// `weights` is the stacked `(K * feature_dim) x n` matrix and `bias` the
    /// stacked `b_k`.
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        weights: Matrix,
        bias: Vec<f64>,
    ) -> Result<Self> {
        check_dim(
            "linear encoder rows",
            num_classes * feature_dim,
            weights.rows(),
        )?;
        check_dim("linear encoder bias", weights.rows(), bias.len())?;
        Ok(Self {
            num_classes,
            feature_dim,
            weights,
            bias,
        })
    }

    /// `A_k = I`, `b_k = 0`: every class embedding equals `w`.
    pub fn identity(num_classes: usize, dim: usize) -> Self {
        let mut weights = Matrix::zeros(num_classes * dim, dim);
        for k in 0..num_classes {
            for i in 0..dim {
                weights.set(k * dim + i, i, 1.0);
            }
        }
        Self {
            num_classes,
            feature_dim: dim,
            weights,
            bias: vec![0.0; num_classes * dim],
        }
    }

    /// `A_k` Gaussian with entries of variance `1/n` drawn from the context
    /// seed; `b_k` is the class-name embedding.
    pub fn from_context(ctx: &ClassContext, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed() ^ LINEAR_SEED_SALT);
        let d = ctx.num_classes() * ctx.feature_dim();
        let weights = Matrix::gaussian(d, n, 1.0 / (n as f64).sqrt(), &mut rng);
        Self {
            num_classes: ctx.num_classes(),
            feature_dim: ctx.feature_dim(),
            weights,
            bias: ctx.class_embeddings().concat(),
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl PromptEncoder for LinearEncoder {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn num_params(&self) -> usize {
        self.weights.cols()
    }

    fn encode(&self, w: &PromptState) -> Result<ClassEmbeddings> {
        check_prompt(w, self.num_params())?;
        let mut v = self.weights.matvec(w.as_slice());
        for (vi, bi) in v.iter_mut().zip(&self.bias) {
            *vi += bi;
        }
        ClassEmbeddings::new(self.num_classes, self.feature_dim, v)
    }

    fn vjp(&self, w: &PromptState, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_prompt(w, self.num_params())?;
        check_dim("cotangent", self.output_dim(), cotangent.len())?;
        Ok(self.weights.matvec_t(cotangent))
    }

    fn jacobian(&self, _w: &PromptState) -> Result<Matrix> {
        Ok(self.weights.clone())
    }
}
