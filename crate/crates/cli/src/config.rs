//! Experiment configuration, read from TOML.
//!
//! ```toml
//! task = "Pr→Rw"            # optional; derived from domain tags if absent
//! method = "proposed"       # zeroshot | prompt_baseline | proposed
//! seed = 0
//! output_dir = "results"
//!
//! [model]
//! kind = "attention"        # attention | linear
//! num_tokens = 4
//! token_dim = 64            # defaults to the feature dimension
//!
//! [data]                    # exactly one of [data] or [synth]
//! source = "Pr.osde"
//! target = "Rw.osde"
//! text = "text.osde"
//! manifest = "classes.toml"
//!
//! [hyperparams]             # every key optional; `seed` lives at top level
//! alpha = 0.1
//!
//! [ablation]
//! use_ce_term = true
//! use_kl_term = true
//! ```
//!
//! Relative data paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use gradsep_core::data::SynthConfig;
use gradsep_core::encoder::EncoderKind;
use gradsep_core::training::{Ablation, Hyperparams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zeroshot,
    PromptBaseline,
    Proposed,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zeroshot => "zeroshot",
            Method::PromptBaseline => "prompt_baseline",
            Method::Proposed => "proposed",
        }
    }
}

fn default_num_tokens() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: EncoderKind,
    #[serde(default = "default_num_tokens")]
    pub num_tokens: usize,
    #[serde(default)]
    pub token_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::default(),
            num_tokens: default_num_tokens(),
            token_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    /// One class-name embedding per class, labelled by manifest index.
    pub text: PathBuf,
    pub manifest: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Option<String>,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub ablation: Ablation,
    /// Directory relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// A config over generated data with every other setting at its default.
    pub fn synthetic(method: Method, synth: SynthConfig, seed: u64) -> Self {
        let mut cfg = Self {
            task: None,
            method,
            seed,
            output_dir: default_output_dir(),
            model: ModelConfig::default(),
            data: None,
            synth: Some(synth),
            hyperparams: Hyperparams::default(),
            ablation: Ablation::default(),
            base_dir: PathBuf::new(),
        };
        cfg.hyperparams.seed = seed;
        cfg
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let value: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let hp_seed = value
            .get("hyperparams")
            .and_then(|h| h.as_table())
            .is_some_and(|h| h.contains_key("seed"));
        if hp_seed {
            return Err(CliError::Config(
                "set `seed` at the top level, not under [hyperparams]".into(),
            ));
        }
        let mut cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.hyperparams.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either [data] or [synth], not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "one of [data] or [synth] is required".into(),
                ))
            }
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => {}
        }
        if self.hyperparams.seed != self.seed {
            return Err(CliError::Config(
                "hyperparams seed differs from experiment seed".into(),
            ));
        }
        self.hyperparams.validate()?;
        if self.model.num_tokens == 0 || self.model.token_dim == Some(0) {
            return Err(CliError::Config(
                "num_tokens and token_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The ablation flags that actually shape training, if any training runs.
    pub fn effective_ablation(&self) -> Option<Ablation> {
        match self.method {
            Method::Zeroshot => None,
            Method::PromptBaseline => Some(Ablation::SOURCE_ONLY),
            Method::Proposed => Some(self.ablation),
        }
    }

    /// SHA-256 of the canonical JSON form of the config, excluding
    /// `output_dir`. Keys are sorted, so field order in the file is
    /// irrelevant.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises to JSON");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let canonical = value.to_string();
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
