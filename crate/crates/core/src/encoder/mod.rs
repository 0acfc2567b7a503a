//! Differentiable surrogates for a frozen text encoder: they map the learnable
//! prompt vector `w` to `K` class embeddings and expose the vector-Jacobian
//! product `c -> (dv/dw)^T c`.
//!
//! Two implementations are provided. [`LinearEncoder`] is affine in `w` and
//! does not normalise its output, so the prompt gradient has a closed form.
//! [`TinyAttentionEncoder`] runs one single-head attention block over the
//! prompt and class tokens and L2-normalises each class embedding; its vjp
//! includes the normalisation derivative.

mod attention;
mod linear;

pub use attention::TinyAttentionEncoder;
pub use linear::LinearEncoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::{dot, Matrix};
use crate::math::VjpProvider;

/// Standard deviation of the initial prompt entries.
pub const PROMPT_INIT_SCALE: f64 = 0.02;

/// The flattened learnable prompt vector `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState(Vec<f64>);

impl PromptState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("prompt state has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Gaussian initialisation with standard deviation [`PROMPT_INIT_SCALE`].
    pub fn init(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(
            Matrix::gaussian(1, n, PROMPT_INIT_SCALE, &mut rng)
                .as_slice()
                .to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// `K` class embeddings of `feature_dim` entries each, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    num_classes: usize,
    feature_dim: usize,
    values: Vec<f64>,
}

impl ClassEmbeddings {
    pub fn new(num_classes: usize, feature_dim: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("class embeddings", num_classes * feature_dim, values.len())?;
        Ok(Self {
            num_classes,
            feature_dim,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class(&self, k: usize) -> &[f64] {
        &self.values[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Inner products `z . v_k` for every class; these are cosine
    /// similarities when both sides are unit length.
    pub fn similarities(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("feature vector", self.feature_dim, z.len())?;
        Ok((0..self.num_classes)
            .map(|k| dot(z, self.class(k)))
            .collect())
    }
}

/// Frozen per-class context: the class-name embedding of every known class
/// plus the seed that derives each encoder's fixed internal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassContext {
    class_embeddings: Vec<Vec<f64>>,
    seed: u64,
}

impl ClassContext {
    pub fn new(class_embeddings: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let Some(first) = class_embeddings.first() else {
            return Err(invalid("class context needs at least one class"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(invalid("class embeddings must be non-empty"));
        }
        for e in &class_embeddings {
            check_dim("class embedding", dim, e.len())?;
            if e.iter().any(|v| !v.is_finite()) {
                return Err(invalid("class embedding has non-finite entries"));
            }
        }
        Ok(Self {
            class_embeddings,
            seed,
        })
    }

    /// Unit-Gaussian entries scaled by `1/sqrt(feature_dim)`.
    pub fn random(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::gaussian(
            num_classes,
            feature_dim,
            1.0 / (feature_dim as f64).sqrt(),
            &mut rng,
        );
        let rows = (0..num_classes).map(|k| m.row(k).to_vec()).collect();
        Self::new(rows, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.class_embeddings.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_embeddings[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_embedding(&self, k: usize) -> &[f64] {
        &self.class_embeddings[k]
    }

    pub fn class_embeddings(&self) -> &[Vec<f64>] {
        &self.class_embeddings
    }

    /// The raw class-name embeddings as a [`ClassEmbeddings`] block, used by
    /// the zero-shot classifier.
    pub fn as_class_embeddings(&self) -> ClassEmbeddings {
        ClassEmbeddings {
            num_classes: self.num_classes(),
            feature_dim: self.feature_dim(),
            values: self.class_embeddings.concat(),
        }
    }
}

/// A prompt encoder: `w -> v` and its vector-Jacobian product.
pub trait PromptEncoder: Send + Sync {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Length `n` of the prompt vector.
    fn num_params(&self) -> usize;

    fn encode(&self, w: &PromptState) -> Result<ClassEmbeddings>;

    /// `(dv/dw)^T cotangent` evaluated at `w`.
    fn vjp(&self, w: &PromptState, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// Flattened output length `d = K * feature_dim`.
    fn output_dim(&self) -> usize {
        self.num_classes() * self.feature_dim()
    }

    /// Dense `d x n` Jacobian assembled row by row from basis cotangents.
    fn jacobian(&self, w: &PromptState) -> Result<Matrix> {
        let d = self.output_dim();
        let mut jac = Matrix::zeros(d, self.num_params());
        let mut basis = vec![0.0; d];
        for i in 0..d {
            basis[i] = 1.0;
            let row = self.vjp(w, &basis)?;
            jac.row_mut(i).copy_from_slice(&row);
            basis[i] = 0.0;
        }
        Ok(jac)
    }
}

/// Which surrogate encoder to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    #[default]
    Attention,
}

impl EncoderKind {
    /// Builds the encoder for `num_tokens` prompt tokens of `token_dim`
    /// entries each, so `n = num_tokens * token_dim`.
    pub fn build(
        self,
        ctx: &ClassContext,
        num_tokens: usize,
        token_dim: usize,
    ) -> Result<Box<dyn PromptEncoder>> {
        if num_tokens == 0 || token_dim == 0 {
            return Err(invalid("prompt needs at least one token of positive width"));
        }
        Ok(match self {
            EncoderKind::Linear => {
                Box::new(LinearEncoder::from_context(ctx, num_tokens * token_dim))
            }
            EncoderKind::Attention => Box::new(TinyAttentionEncoder::from_context(
                ctx, num_tokens, token_dim,
            )),
        })
    }
}

/// An encoder linearised at a fixed prompt state.
pub struct EncoderAt<'a, E: ?Sized> {
    pub encoder: &'a E,
    pub w: &'a PromptState,
}

impl<'a, E: PromptEncoder + ?Sized> EncoderAt<'a, E> {
    pub fn new(encoder: &'a E, w: &'a PromptState) -> Self {
        Self { encoder, w }
    }
}

impl<E: PromptEncoder + ?Sized> VjpProvider for EncoderAt<'_, E> {
    fn output_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn param_dim(&self) -> usize {
        self.encoder.num_params()
    }

    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.encoder.vjp(self.w, cotangent)
    }
}

/// A materialised Jacobian; vjp is a single transposed mat-vec. Used when
/// many samples are scored against the same prompt state.
pub struct DenseJacobian(Matrix);

impl DenseJacobian {
    pub fn compute<E: PromptEncoder + ?Sized>(encoder: &E, w: &PromptState) -> Result<Self> {
        Ok(Self(encoder.jacobian(w)?))
    }

    pub fn from_matrix(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl VjpProvider for DenseJacobian {
    fn output_dim(&self) -> usize {
        self.0.rows()
    }

    fn param_dim(&self) -> usize {
        self.0.cols()
    }

    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_dim("cotangent", self.0.rows(), cotangent.len())?;
        Ok(self.0.matvec_t(cotangent))
    }
}

/// Central-difference Jacobian of `encode`, `d x n`. Test oracle only.
pub fn finite_diff_jacobian<E: PromptEncoder + ?Sized>(
    encoder: &E,
    w: &PromptState,
    step: f64,
) -> Result<Matrix> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let n = w.len();
    let d = encoder.output_dim();
    let mut jac = Matrix::zeros(d, n);
    let mut probe = w.clone();
    for j in 0..n {
        let orig = probe.as_slice()[j];
        probe.as_mut_slice()[j] = orig + step;
        let plus = encoder.encode(&probe)?;
        probe.as_mut_slice()[j] = orig - step;
        let minus = encoder.encode(&probe)?;
        probe.as_mut_slice()[j] = orig;
        for i in 0..d {
            jac.set(
                i,
                j,
                (plus.as_slice()[i] - minus.as_slice()[i]) / (2.0 * step),
            );
        }
    }
    Ok(jac)
}

pub(crate) fn check_prompt(w: &PromptState, n: usize) -> Result<()> {
    check_dim("prompt vector", n, w.len())
}
