//! Class manifest, known/unknown split, and conversion of raw records into
//! normalised `f64` samples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{EmbeddingRecord, UNLABELED};
use crate::encoder::ClassContext;
use crate::error::{invalid, Error, Result};
use crate::linalg::normalized;

/// Sidecar manifest describing a dataset's label space, stored as TOML:
///
/// ```toml
/// classes = ["Alarm_Clock", "Backpack", ...]   # label-index order
/// num_known = 25
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub num_known: usize,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        toml::from_str(&text)
            .map_err(|e| Error::Malformed(format!("manifest {}: {e}", path.as_ref().display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Malformed(format!("cannot serialise manifest: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn protocol(&self) -> Result<OpenSetProtocol> {
        split_protocol(&self.classes, self.num_known)
    }
}

/// Which labels are known. Every other label is the single rejected
/// "unknown" category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSetProtocol {
    /// Sorted indices into the manifest's class list.
    pub known_class_indices: Vec<usize>,
    pub num_classes: usize,
}

impl OpenSetProtocol {
    pub fn new(known_class_indices: Vec<usize>, num_classes: usize) -> Result<Self> {
        if known_class_indices.is_empty() {
            return Err(invalid("protocol needs at least one known class"));
        }
        let mut sorted = known_class_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != known_class_indices.len() {
            return Err(invalid("duplicate known class index"));
        }
        if sorted.last().is_some_and(|&i| i >= num_classes) {
            return Err(invalid("known class index out of range"));
        }
        Ok(Self {
            known_class_indices: sorted,
            num_classes,
        })
    }

    pub fn num_known(&self) -> usize {
        self.known_class_indices.len()
    }

    pub fn num_unknown(&self) -> usize {
        self.num_classes - self.num_known()
    }

    /// Position of `label` among the known classes, i.e. its classifier
    /// output index.
    pub fn classifier_index(&self, label: usize) -> Option<usize> {
        self.known_class_indices.binary_search(&label).ok()
    }
}

/// The first `num_known` classes in case-insensitive alphabetical order are
/// known; the rest are unknown.
pub fn split_protocol(class_names: &[String], num_known: usize) -> Result<OpenSetProtocol> {
    if num_known == 0 || num_known > class_names.len() {
        return Err(invalid(format!(
            "num_known must lie in 1..={}, got {num_known}",
            class_names.len()
        )));
    }
    let mut order: Vec<usize> = (0..class_names.len()).collect();
    order.sort_by(|&a, &b| {
        class_names[a]
            .to_lowercase()
            .cmp(&class_names[b].to_lowercase())
            .then(a.cmp(&b))
    });
    order.truncate(num_known);
    OpenSetProtocol::new(order, class_names.len())
}

/// A feature ready for computation: `f64`, unit length, with its classifier
/// index (`None` for samples of unknown classes).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub feature: Vec<f64>,
    pub class: Option<usize>,
}

fn to_unit(record: &EmbeddingRecord) -> Result<Vec<f64>> {
    let raw = record.feature_f64();
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::Malformed(format!(
            "record {} has non-finite features",
            record.id
        )));
    }
    normalized(&raw)
        .ok_or_else(|| Error::Malformed(format!("record {} has a zero feature", record.id)))
}

fn checked_label(record: &EmbeddingRecord, protocol: &OpenSetProtocol) -> Result<usize> {
    if record.label == UNLABELED {
        return Err(Error::Protocol(format!(
            "record {} is unlabeled",
            record.id
        )));
    }
    let label = record.label as usize;
    if label >= protocol.num_classes {
        return Err(Error::Protocol(format!(
            "record {} has label {} but the manifest lists {} classes",
            record.id, record.label, protocol.num_classes
        )));
    }
    Ok(label)
}

/// Source samples: records of unknown classes are dropped, since the source
/// label space is the known set.
pub fn source_samples(
    records: &[EmbeddingRecord],
    protocol: &OpenSetProtocol,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for r in records {
        let label = checked_label(r, protocol)?;
        if let Some(class) = protocol.classifier_index(label) {
            out.push(Sample {
                id: r.id.clone(),
                feature: to_unit(r)?,
                class: Some(class),
            });
        }
    }
    Ok(out)
}

/// Target samples keep every record; labels are needed for evaluation only.
pub fn target_samples(
    records: &[EmbeddingRecord],
    protocol: &OpenSetProtocol,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let label = checked_label(r, protocol)?;
            Ok(Sample {
                id: r.id.clone(),
                feature: to_unit(r)?,
                class: protocol.classifier_index(label),
            })
        })
        .collect()
}

/// Builds the class context from class-text records (one per class, label =
/// manifest index). Only the known classes are used, in classifier order.
pub fn class_context_from_records(
    records: &[EmbeddingRecord],
    protocol: &OpenSetProtocol,
    seed: u64,
) -> Result<ClassContext> {
    let mut embeddings = Vec::with_capacity(protocol.num_known());
    for &label in &protocol.known_class_indices {
        let record = records
            .iter()
            .find(|r| r.label == label as i32)
            .ok_or_else(|| Error::Protocol(format!("no class embedding for label {label}")))?;
        embeddings.push(to_unit(record)?);
    }
    ClassContext::new(embeddings, seed)
}

/// Inverse of [`class_context_from_records`]: one record per known class.
pub fn class_context_to_records(
    ctx: &ClassContext,
    protocol: &OpenSetProtocol,
    class_names: &[String],
) -> Result<Vec<EmbeddingRecord>> {
    if ctx.num_classes() != protocol.num_known() {
        return Err(invalid("class context does not match the protocol"));
    }
    Ok(protocol
        .known_class_indices
        .iter()
        .zip(ctx.class_embeddings())
        .map(|(&label, e)| EmbeddingRecord {
            id: class_names.get(label).cloned().unwrap_or_default(),
            label: label as i32,
            domain: "text".to_string(),
            feature: e.iter().map(|&x| x as f32).collect(),
        })
        .collect())
}
