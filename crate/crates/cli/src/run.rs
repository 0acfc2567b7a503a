//! Executes one experiment and records it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use gradsep_core::data::{
    class_context_from_records, read_embeddings, source_samples, synth_generate, target_samples,
    EmbeddingRecord, Manifest, OpenSetProtocol, Sample,
};
use gradsep_core::encoder::{ClassContext, EncoderKind};
use gradsep_core::metrics::MetricTriple;
use gradsep_core::separation::Threshold;
use gradsep_core::training::{evaluate_msp, run_adaptation, Ablation, EpochLog};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, CliResult};

pub const LEDGER_FILE: &str = "results.jsonl";

/// The open-set split an experiment ran under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub known_classes: Vec<String>,
    pub num_unknown: usize,
}

/// One ledger record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: String,
    pub method: Method,
    /// Loss terms active during training; absent when nothing is trained.
    pub ablation: Option<Ablation>,
    pub seed: u64,
    pub fingerprint: String,
    pub metrics: MetricTriple,
    /// Final separation threshold; absent for zero-shot.
    pub threshold: Option<Threshold>,
    pub temperature: f64,
    pub encoder: EncoderKind,
    pub split: SplitInfo,
}

impl ExperimentResult {
    /// Row label used by tables: the method, plus the active terms when a
    /// proposed run is ablated.
    pub fn variant(&self) -> String {
        match (self.method, self.ablation) {
            (Method::Proposed, Some(a)) if a != Ablation::FULL => {
                let terms = match (a.use_ce_term, a.use_kl_term) {
                    (true, false) => "+ce",
                    (false, true) => "+kl",
                    _ => "none",
                };
                format!("proposed[{terms}]")
            }
            (m, _) => m.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: ExperimentResult,
    pub epochs: Vec<EpochLog>,
}

struct Dataset {
    task: String,
    source: Vec<Sample>,
    target: Vec<Sample>,
    context: ClassContext,
    split: SplitInfo,
}

fn domain_of(records: &[EmbeddingRecord]) -> Option<&str> {
    records
        .first()
        .map(|r| r.domain.as_str())
        .filter(|d| !d.is_empty())
}

fn split_info(manifest: &Manifest, protocol: &OpenSetProtocol) -> SplitInfo {
    SplitInfo {
        known_classes: protocol
            .known_class_indices
            .iter()
            .map(|&i| manifest.classes[i].clone())
            .collect(),
        num_unknown: protocol.num_unknown(),
    }
}

fn read_records(
    path: &Path,
    feature_dim: Option<usize>,
) -> CliResult<(usize, Vec<EmbeddingRecord>)> {
    if !path.exists() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    let file =
        read_embeddings(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if let Some(dim) = feature_dim {
        if file.feature_dim != dim {
            return Err(CliError::Data(format!(
                "{} has feature_dim {} but earlier files have {dim}",
                path.display(),
                file.feature_dim
            )));
        }
    }
    Ok((file.feature_dim, file.records))
}

fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let (source_records, target_records, text_records, manifest) = match (&cfg.data, &cfg.synth) {
        (Some(paths), None) => {
            let manifest = Manifest::load(cfg.resolve(&paths.manifest))
                .map_err(|e| CliError::Data(format!("manifest: {e}")))?;
            let (dim, source) = read_records(&cfg.resolve(&paths.source), None)?;
            let (_, target) = read_records(&cfg.resolve(&paths.target), Some(dim))?;
            let (_, text) = read_records(&cfg.resolve(&paths.text), Some(dim))?;
            (source, target, text, manifest)
        }
        (None, Some(synth)) => {
            let data = synth_generate(synth)?;
            (data.source, data.target, data.text, data.manifest)
        }
        _ => {
            return Err(CliError::Config(
                "one of [data] or [synth] is required".into(),
            ))
        }
    };
    let protocol = manifest
        .protocol()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let task = match &cfg.task {
        Some(t) => t.clone(),
        None if cfg.synth.is_some() => "synthetic".to_string(),
        None => match (domain_of(&source_records), domain_of(&target_records)) {
            (Some(s), Some(t)) => format!("{s}→{t}"),
            _ => {
                return Err(CliError::Config(
                    "no task name and no domain tags to derive one".into(),
                ))
            }
        },
    };
    let source = source_samples(&source_records, &protocol)?;
    if source.is_empty() {
        return Err(CliError::Data(
            "source set has no known-class records".into(),
        ));
    }
    Ok(Dataset {
        task,
        target: target_samples(&target_records, &protocol)?,
        source,
        context: class_context_from_records(&text_records, &protocol, cfg.seed)?,
        split: split_info(&manifest, &protocol),
    })
}

/// Runs the configured method without touching the filesystem beyond
/// reading inputs.
pub fn execute(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let t = cfg.hyperparams.temperature;
    let (metrics, threshold, epochs) = match cfg.effective_ablation() {
        None => (
            evaluate_msp(&data.target, &data.context.as_class_embeddings(), t)?,
            None,
            Vec::new(),
        ),
        Some(ablation) => {
            let token_dim = cfg.model.token_dim.unwrap_or(data.context.feature_dim());
            let encoder = cfg
                .model
                .kind
                .build(&data.context, cfg.model.num_tokens, token_dim)?;
            let out = run_adaptation(
                &data.source,
                &data.target,
                encoder.as_ref(),
                &cfg.hyperparams,
                ablation,
            )?;
            (out.metrics, Some(out.threshold), out.log)
        }
    };
    Ok(RunOutput {
        result: ExperimentResult {
            task: data.task,
            method: cfg.method,
            ablation: cfg.effective_ablation(),
            seed: cfg.seed,
            fingerprint: cfg.fingerprint(),
            metrics,
            threshold,
            temperature: t.value(),
            encoder: cfg.model.kind,
            split: data.split,
        },
        epochs,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Appends one JSON line to the ledger in `dir`, creating it if needed.
pub fn append_to_ledger(dir: &Path, result: &ExperimentResult) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(LEDGER_FILE);
    let line = serde_json::to_string(result).expect("result serialises to JSON");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    writeln!(file, "{line}").map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn read_ledger(path: &Path) -> CliResult<Vec<ExperimentResult>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Runs the experiment, appends its record to `results.jsonl` in the output
/// directory, and writes the per-epoch log next to it.
pub fn cmd_run(cfg: &ExperimentConfig) -> CliResult<ExperimentResult> {
    let out = execute(cfg)?;
    let dir = cfg.resolve(&cfg.output_dir);
    append_to_ledger(&dir, &out.result)?;
    if !out.epochs.is_empty() {
        let path = dir.join(format!("epochs-{}.jsonl", &out.result.fingerprint[..16]));
        let body: String = out
            .epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serialises") + "\n")
            .collect();
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(out.result)
}
