//! Structured application configuration: a TOML file with one section per
//! component, plus `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use dvagen_core::inference::GenerationConfig;
use dvagen_core::model::ModelConfig;
use dvagen_core::sampler::SamplerConfig;
use dvagen_core::text::CorpusFormat;
use dvagen_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub train_log: PathBuf,
    /// Held-out texts for `eval`, same format as the corpus.
    pub test: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.txt".into(),
            corpus_format: CorpusFormat::PlainLines,
            vocab: "out/vocab.txt".into(),
            checkpoint: "out/model.ckpt".into(),
            index: "out/index.bin".into(),
            train_log: "out/train_log.jsonl".into(),
            test: "data/test.txt".into(),
            report_dir: "out/report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Target size when a vocabulary is trained from the corpus.
    pub size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { size: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub session_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            session_capacity: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Leading words of each test text used as the prefix; the rest is the reference.
    pub prefix_words: usize,
    pub max_samples: usize,
    pub batch_size: usize,
    pub batch_sizes: Vec<usize>,
    pub benchmark_length: usize,
    pub benchmark_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prefix_words: 4,
            max_samples: 100,
            batch_size: 8,
            batch_sizes: vec![1, 2, 4, 8],
            benchmark_length: 64,
            benchmark_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub generation: GenerationConfig,
    pub server: ServerConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// Parse TOML text, apply overrides, and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> AppResult<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| AppError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: AppConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            config.paths.resolve_against(dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.generation.validate()?;
        if self.server.session_capacity == 0 {
            return Err(AppError::Config(
                "server.session_capacity must be >= 1".into(),
            ));
        }
        if self.eval.batch_size == 0 || self.eval.batch_sizes.contains(&0) {
            return Err(AppError::Config("eval batch sizes must be >= 1".into()));
        }
        if self.vocab.size < 5 {
            return Err(AppError::Config("vocab.size must be >= 5".into()));
        }
        Ok(())
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, dir: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.vocab,
            &mut self.checkpoint,
            &mut self.index,
            &mut self.train_log,
            &mut self.test,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Apply `section.key=value`. The value is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> AppResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            AppError::Config(format!("override {key:?} descends into a non-table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
