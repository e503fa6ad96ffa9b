//! Run configuration: a TOML file with sections for paths, model size,
//! training and decoding, plus dotted-path command-line overrides
//! (`--set training.seed=7`). Every command records a manifest with a hash
//! of the effective configuration so runs can be audited and reproduced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::ssmodel::ModelConfig;
use crate::{Error, Result};

/// File locations for corpora and produced artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub valid_source: PathBuf,
    pub valid_target: PathBuf,
    /// Directory receiving the BPE model, vocabularies, lexicon,
    /// checkpoints, logs and manifests.
    pub artifact_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_source: "data/train.src".into(),
            train_target: "data/train.tgt".into(),
            valid_source: "data/valid.src".into(),
            valid_target: "data/valid.tgt".into(),
            artifact_dir: "artifacts".into(),
        }
    }
}

/// Model size knobs; vocabulary sizes are filled in from the data artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Maximum subword length in characters.
    pub max_seg_len: usize,
    /// Target-side lexicon capacity.
    pub lexicon_size: usize,
    /// Source-side BPE merge operations.
    pub bpe_merges: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lstm_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            max_seg_len: 5,
            lexicon_size: 5000,
            bpe_merges: 5000,
            dim: 64,
            ffn_dim: 128,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            lstm_dim: 64,
        }
    }
}

impl ModelSection {
    /// Completes a [`ModelConfig`] once the data-dependent sizes are known.
    pub fn to_model_config(
        &self,
        src_vocab_size: usize,
        char_vocab_size: usize,
        lexicon_size: usize,
    ) -> ModelConfig {
        ModelConfig {
            src_vocab_size,
            char_vocab_size,
            lexicon_size,
            max_seg_len: self.max_seg_len,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            lstm_dim: self.lstm_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    /// Batch size measured in target characters, not sentences.
    pub batch_chars: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Cap on validation sentences decoded for the per-epoch chrF.
    pub valid_sample: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 1e-3,
            batch_chars: 2000,
            max_epochs: 30,
            patience: 5,
            seed: 1,
            valid_sample: 200,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub decoding: BeamConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.max_seg_len == 0 {
            return Err(Error::InvalidArgument("max_seg_len must be positive".into()));
        }
        if self.model.lexicon_size == 0 {
            return Err(Error::InvalidArgument("lexicon_size must be positive".into()));
        }
        if self.training.learning_rate <= 0.0 || !self.training.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad learning rate {}",
                self.training.learning_rate
            )));
        }
        if self.training.max_epochs == 0 || self.training.batch_chars == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs and batch_chars must be positive".into(),
            ));
        }
        self.decoding.validate()
    }

    /// Loads the configuration: defaults, overlaid with the TOML file (if
    /// given), overlaid with `--set section.key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Data(format!("default config: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Data(format!("cannot read config {}: {e}", path.display()))
            })?;
            let file_value: toml::Value = text
                .parse()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Data(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hexadecimal digest of the effective configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Recursively overlays `other` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, other: toml::Value) {
    match (base, other) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(value: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("override {item:?} is not of the form key=value"))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad override key {path:?}")));
    }
    let mut node = value;
    for &k in &keys[..keys.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("override {path:?} descends into a non-table"))
        })?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        Error::InvalidArgument(format!("override {path:?} descends into a non-table"))
    })?;
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// Machine-readable record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Free-form command-specific facts (vocabulary sizes, seeds, scores).
    pub details: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn detail(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.details.insert(key.to_string(), value.to_string());
        self
    }

    /// Writes the manifest as pretty JSON to
    /// `<artifact_dir>/manifest-<command>.json`.
    pub fn write(&self, artifact_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(artifact_dir)?;
        let path = artifact_dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
