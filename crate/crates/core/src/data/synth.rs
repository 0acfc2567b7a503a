//! Seeded synthetic embeddings: known classes shared by both domains under
//! covariate shift, plus target-only unknown classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::EmbeddingRecord;
use super::protocol::Manifest;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_known_classes: usize,
    pub num_unknown_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Expected L2 norm of the isotropic noise added to a cluster center.
    pub cluster_spread: f64,
    /// Rotation (radians) applied to target samples of known classes.
    pub covariate_shift_angle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_known_classes: 10,
            num_unknown_classes: 5,
            samples_per_class: 50,
            feature_dim: 64,
            cluster_spread: 1.5,
            covariate_shift_angle: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_known_classes < 2 {
            return bad("synthetic data needs at least 2 known classes".into());
        }
        if self.num_unknown_classes < 1 || self.samples_per_class < 1 {
            return bad("class and sample counts must be at least 1".into());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!(
                "cluster_spread must be positive, got {}",
                self.cluster_spread
            ));
        }
        if !self.covariate_shift_angle.is_finite() {
            return bad("covariate_shift_angle must be finite".into());
        }
        let total = self.num_known_classes + self.num_unknown_classes;
        if self.feature_dim < total {
            return bad(format!(
                "feature_dim {} cannot hold {total} orthogonal class centers",
                self.feature_dim
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let total = self.num_known_classes + self.num_unknown_classes;
        let width = total.saturating_sub(1).to_string().len();
        (0..total).map(|i| format!("class_{i:0width$}")).collect()
    }
}

/// Generated records plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub source: Vec<EmbeddingRecord>,
    pub target: Vec<EmbeddingRecord>,
    /// One class-name embedding per known class (its cluster center).
    pub text: Vec<EmbeddingRecord>,
    pub manifest: Manifest,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gram-Schmidt against `basis` (assumed orthonormal), then normalise.
fn orthonormal_against(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    // Two passes keep the result orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
    }
    normalized(&v)
}

/// Rotates `x` by `angle` inside the plane spanned by orthonormal `a`, `b`.
fn rotate_in_plane(x: &[f64], a: &[f64], b: &[f64], angle: f64) -> Vec<f64> {
    let (xa, xb) = (dot(x, a), dot(x, b));
    let (s, c) = angle.sin_cos();
    let mut out = x.to_vec();
    axpy((c - 1.0) * xa - s * xb, a, &mut out);
    axpy(s * xa + (c - 1.0) * xb, b, &mut out);
    out
}

fn to_record(id: String, label: usize, domain: &str, feature: &[f64]) -> EmbeddingRecord {
    EmbeddingRecord {
        id,
        label: label as i32,
        domain: domain.to_string(),
        feature: feature.iter().map(|&x| x as f32).collect(),
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let total = cfg.num_known_classes + cfg.num_unknown_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total);
    while centers.len() < total {
        if let Some(c) = orthonormal_against(gaussian(&mut rng, dim), &centers) {
            centers.push(c);
        }
    }
    // The shift plane of class k is spanned by its center and a random
    // direction orthogonal to that center.
    let mut shift_axes = Vec::with_capacity(cfg.num_known_classes);
    while shift_axes.len() < cfg.num_known_classes {
        let k = shift_axes.len();
        if let Some(q) = orthonormal_against(gaussian(&mut rng, dim), &centers[k..k + 1]) {
            shift_axes.push(q);
        }
    }

    let noise_scale = cfg.cluster_spread / (dim as f64).sqrt();
    let draw = |rng: &mut ChaCha8Rng, center: &[f64]| -> Vec<f64> {
        loop {
            let mut x = center.to_vec();
            axpy(noise_scale, &gaussian(rng, dim), &mut x);
            if let Some(u) = normalized(&x) {
                return u;
            }
        }
    };

    let names = cfg.class_names();
    let mut source = Vec::new();
    let mut target = Vec::new();
    for i in 0..cfg.samples_per_class {
        for k in 0..cfg.num_known_classes {
            let x = draw(&mut rng, &centers[k]);
            source.push(to_record(
                format!("src-{}-{i:04}", names[k]),
                k,
                "source",
                &x,
            ));
        }
    }
    for i in 0..cfg.samples_per_class {
        for (k, center) in centers.iter().enumerate() {
            let x = draw(&mut rng, center);
            let x = if k < cfg.num_known_classes {
                let rotated =
                    rotate_in_plane(&x, &centers[k], &shift_axes[k], cfg.covariate_shift_angle);
                normalized(&rotated).expect("rotation preserves norm")
            } else {
                x
            };
            target.push(to_record(
                format!("tgt-{}-{i:04}", names[k]),
                k,
                "target",
                &x,
            ));
        }
    }
    let text = (0..cfg.num_known_classes)
        .map(|k| to_record(names[k].clone(), k, "text", &centers[k]))
        .collect();

    Ok(SynthData {
        source,
        target,
        text,
        manifest: Manifest {
            classes: names,
            num_known: cfg.num_known_classes,
        },
    })
}
