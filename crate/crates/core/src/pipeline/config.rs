//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::StratumKey;
use crate::digest::sha256_hex;
use crate::figure::DEFAULT_MATCH_THRESHOLD;
use crate::gateway::{ModelEndpointConfig, ModelRole};
use crate::verification::VoteRule;

fn default_seed() -> u64 {
    0
}
fn default_threshold() -> f64 {
    DEFAULT_MATCH_THRESHOLD
}
fn default_concurrency() -> usize {
    4
}
fn default_batch_size() -> usize {
    1000
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_strata() -> Vec<StratumKey> {
    vec![StratumKey::QuestionType, StratumKey::Domain, StratumKey::FigureType]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Line-delimited figure records.
    pub records: PathBuf,
    /// Directory of `<arxiv_id>.tex` files.
    pub latex_dir: PathBuf,
    /// Base for relative image paths; defaults to the records' directory.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default)]
    pub text: Option<ModelEndpointConfig>,
    #[serde(default)]
    pub vision: Option<ModelEndpointConfig>,
    /// Model under evaluation; must decode greedily.
    #[serde(default)]
    pub eval: Option<ModelEndpointConfig>,
    /// Taxonomy annotators; default to `text` and `vision`.
    #[serde(default)]
    pub annotate_text: Option<ModelEndpointConfig>,
    #[serde(default)]
    pub annotate_vision: Option<ModelEndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Stratified sample size; the whole dataset when unset.
    #[serde(default)]
    pub sample_size: Option<usize>,
    #[serde(default = "default_strata")]
    pub strata: Vec<StratumKey>,
    /// Records allowed to stay unevaluated before the stage fails.
    #[serde(default)]
    pub max_unevaluated: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            sample_size: None,
            strata: default_strata(),
            max_unevaluated: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Caption similarity threshold, in (0, 1].
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Papers per batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Stop the end-to-end run after the batch that reaches this many
    /// retained records.
    #[serde(default)]
    pub target_retained: Option<usize>,
    #[serde(default)]
    pub vote_rule: VoteRule,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Directory with one `<template>.txt` per prompt; built-ins otherwise.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        resolve(base, &mut cfg.output_dir);
        resolve(base, &mut cfg.corpus.records);
        resolve(base, &mut cfg.corpus.latex_dir);
        if let Some(p) = cfg.corpus.image_root.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = cfg.prompt_dir.as_mut() {
            resolve(base, p);
        }
        let m = &mut cfg.models;
        for (slot, role) in [
            (&mut m.text, ModelRole::Text),
            (&mut m.vision, ModelRole::Vision),
            (&mut m.eval, ModelRole::Vision),
            (&mut m.annotate_text, ModelRole::Text),
            (&mut m.annotate_vision, ModelRole::Vision),
        ] {
            if let Some(c) = slot.as_mut() {
                c.role = role;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(PipelineError::Config(format!("threshold {} is outside (0, 1]", self.threshold)));
        }
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be at least 1".into()));
        }
        if self.evaluation.strata.is_empty() {
            return Err(PipelineError::Config("evaluation.strata is empty".into()));
        }
        Ok(())
    }

    pub fn image_root(&self) -> PathBuf {
        self.corpus.image_root.clone().unwrap_or_else(|| {
            self.corpus
                .records
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }

    /// Hash of the settings that influence outputs. Paths are excluded so
    /// the same run in another directory has the same digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.corpus.records = PathBuf::new();
        c.corpus.latex_dir = PathBuf::new();
        c.corpus.image_root = None;
        c.prompt_dir = None;
        c.concurrency = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
