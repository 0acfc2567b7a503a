use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_prompt, ClassContext, ClassEmbeddings, PromptEncoder, PromptState};
use crate::error::{check_dim, Result};
use crate::linalg::{axpy, dot, l2_norm, Matrix};

const ATTENTION_SEED_SALT: u64 = 0x4154_544e;

/// One single-head self-attention block over `[prompt tokens || class token]`
/// followed by a residual connection, mean pooling, an output projection
/// added to the class-name embedding, and L2 normalisation:
///
/// ```text
/// X = [w_1; ...; w_T; c_k]          c_k = Wc e_k
/// H = softmax(X Wq (X Wk)^T / sqrt(dt)) X Wv
/// u_k = e_k + Wo mean_rows(X + H)
/// v_k = u_k / |u_k|
/// ```
///
/// The prompt tokens are shared by every class.
#[derive(Debug, Clone)]
pub struct TinyAttentionEncoder {
    num_tokens: usize,
    token_dim: usize,
    class_embeddings: Vec<Vec<f64>>,
    class_tokens: Vec<Vec<f64>>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

/// Forward intermediates for one class.
struct Forward {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    u: Vec<f64>,
}

impl TinyAttentionEncoder {
    pub fn from_context(ctx: &ClassContext, num_tokens: usize, token_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed() ^ ATTENTION_SEED_SALT);
        let dt = token_dim;
        let df = ctx.feature_dim();
        let s = 1.0 / (dt as f64).sqrt();
        let wq = Matrix::gaussian(dt, dt, s, &mut rng);
        let wk = Matrix::gaussian(dt, dt, s, &mut rng);
        let wv = Matrix::gaussian(dt, dt, s, &mut rng);
        let wo = Matrix::gaussian(df, dt, s, &mut rng);
        let wc = Matrix::gaussian(dt, df, s, &mut rng);
        let class_tokens = ctx
            .class_embeddings()
            .iter()
            .map(|e| wc.matvec(e))
            .collect();
        Self {
            num_tokens,
            token_dim,
            class_embeddings: ctx.class_embeddings().to_vec(),
            class_tokens,
            wq,
            wk,
            wv,
            wo,
        }
    }

    fn seq_len(&self) -> usize {
        self.num_tokens + 1
    }

    fn forward(&self, w: &[f64], class: usize) -> Forward {
        let dt = self.token_dim;
        let mut x = Matrix::zeros(self.seq_len(), dt);
        for t in 0..self.num_tokens {
            x.row_mut(t).copy_from_slice(&w[t * dt..(t + 1) * dt]);
        }
        x.row_mut(self.num_tokens)
            .copy_from_slice(&self.class_tokens[class]);

        let q = x.matmul(&self.wq);
        let k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let mut attn = q.matmul_t(&k);
        let scale = 1.0 / (dt as f64).sqrt();
        for r in 0..attn.rows() {
            softmax_in_place(attn.row_mut(r), scale);
        }
        let h = attn.matmul(&v);

        let len = self.seq_len() as f64;
        let mut pooled = vec![0.0; dt];
        for r in 0..x.rows() {
            axpy(1.0 / len, x.row(r), &mut pooled);
            axpy(1.0 / len, h.row(r), &mut pooled);
        }
        let mut u = self.wo.matvec(&pooled);
        axpy(1.0, &self.class_embeddings[class], &mut u);
        Forward {
            x,
            q,
            k,
            v,
            attn,
            u,
        }
    }

    /// Accumulates `(dv_k/dw)^T g` into `grad_w`.
    fn backward(&self, fwd: &Forward, g: &[f64], grad_w: &mut [f64]) {
        let dt = self.token_dim;
        let norm = l2_norm(&fwd.u);
        let v: Vec<f64> = fwd.u.iter().map(|x| x / norm).collect();
        let radial = dot(&v, g);
        let grad_u: Vec<f64> = g
            .iter()
            .zip(&v)
            .map(|(gi, vi)| (gi - vi * radial) / norm)
            .collect();
        let grad_pooled = self.wo.matvec_t(&grad_u);

        let len = self.seq_len();
        let mut grad_rows = Matrix::zeros(len, dt);
        for r in 0..len {
            axpy(1.0 / len as f64, &grad_pooled, grad_rows.row_mut(r));
        }
        // Residual path and attention path receive the same upstream rows.
        let mut grad_x = grad_rows.clone();
        let grad_h = grad_rows;

        let grad_attn = grad_h.matmul_t(&fwd.v);
        let grad_v = fwd.attn.t_matmul(&grad_h);
        let scale = 1.0 / (dt as f64).sqrt();
        let mut grad_scores = Matrix::zeros(len, len);
        for r in 0..len {
            let a = fwd.attn.row(r);
            let ga = grad_attn.row(r);
            let inner = dot(a, ga);
            for (c, out) in grad_scores.row_mut(r).iter_mut().enumerate() {
                *out = a[c] * (ga[c] - inner) * scale;
            }
        }
        let grad_q = grad_scores.matmul(&fwd.k);
        let grad_k = grad_scores.t_matmul(&fwd.q);

        grad_x.add_assign(&grad_q.matmul_t(&self.wq));
        grad_x.add_assign(&grad_k.matmul_t(&self.wk));
        grad_x.add_assign(&grad_v.matmul_t(&self.wv));

        for t in 0..self.num_tokens {
            axpy(1.0, grad_x.row(t), &mut grad_w[t * dt..(t + 1) * dt]);
        }
        debug_assert_eq!(fwd.x.rows(), len);
    }
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl PromptEncoder for TinyAttentionEncoder {
    fn num_classes(&self) -> usize {
        self.class_embeddings.len()
    }

    fn feature_dim(&self) -> usize {
        self.wo.rows()
    }

    fn num_params(&self) -> usize {
        self.num_tokens * self.token_dim
    }

    fn encode(&self, w: &PromptState) -> Result<ClassEmbeddings> {
        check_prompt(w, self.num_params())?;
        let mut out = Vec::with_capacity(self.output_dim());
        for class in 0..self.num_classes() {
            let fwd = self.forward(w.as_slice(), class);
            let norm = l2_norm(&fwd.u);
            out.extend(fwd.u.iter().map(|x| x / norm));
        }
        ClassEmbeddings::new(self.num_classes(), self.feature_dim(), out)
    }

    fn vjp(&self, w: &PromptState, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_prompt(w, self.num_params())?;
        check_dim("cotangent", self.output_dim(), cotangent.len())?;
        let df = self.feature_dim();
        let mut grad = vec![0.0; self.num_params()];
        for class in 0..self.num_classes() {
            let g = &cotangent[class * df..(class + 1) * df];
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let fwd = self.forward(w.as_slice(), class);
            self.backward(&fwd, g, &mut grad);
        }
        Ok(grad)
    }
}
