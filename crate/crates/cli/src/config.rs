// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration file.
//!
//! A config is a TOML document with a mandatory `seed`, a `[world]` and
//! `[corpus]` section (every field optional, defaults as in the library), one
//! `[[models]]` table per model size, a `[train]` table with every optimizer
//! field spelled out, and an optional `[analysis]` table. Unknown keys are
//! rejected. See `configs/desk.toml` for a fully commented example.

use std::path::{Path, PathBuf};

use factlab_core::corpus::{build_world_with, CorpusConfig, WorldConfig, WorldSpec};
use factlab_core::intervention::default_alpha_grid;
use factlab_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Governs every stage; per-stage seeds are fixed offsets of it.
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub models: Vec<ModelSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// A model shape without the vocabulary size, which comes from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_context: usize,
    #[serde(default = "four")]
    pub mlp_multiple: usize,
}

fn four() -> usize {
    4
}

impl ModelSpec {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            vocab_size,
            max_context: self.max_context,
            mlp_multiple: self.mlp_multiple,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaGrid {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl AlphaGrid {
    /// Grid points, rounded to ten decimals so that `1.0` lands exactly.
    pub fn values(&self) -> Vec<f64> {
        match self {
            AlphaGrid::List(v) => v.clone(),
            AlphaGrid::Range { start, stop, step } => {
                if *step <= 0.0 || stop < start {
                    return Vec::new();
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n)
                    .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
                    .collect()
            }
        }
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::List(default_alpha_grid())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_bins: usize,
    /// Greedy decoding budget per prompt.
    pub max_new: usize,
    /// Selection-set draws per bin and class.
    pub per_bin: usize,
    /// Prompts per attribution map.
    pub batch_size: usize,
    pub alpha_grid: AlphaGrid,
    pub svd_top_k: usize,
    pub svd_vectors: usize,
    /// Relation family used for the transfer test.
    pub transfer_family: u8,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_bins: 10,
            max_new: 12,
            per_bin: 10,
            batch_size: 5,
            alpha_grid: AlphaGrid::default(),
            svd_top_k: 10,
            svd_vectors: 5,
            transfer_family: 1,
        }
    }
}

pub const WORLD_SEED_OFFSET: u64 = 0;
pub const CORPUS_SEED_OFFSET: u64 = 1;
pub const TRAIN_SEED_OFFSET: u64 = 2;
pub const SELECTION_SEED_OFFSET: u64 = 3;

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn world(&self) -> Result<WorldSpec> {
        Ok(build_world_with(self.seed.wrapping_add(WORLD_SEED_OFFSET), &self.world)?)
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| CliError::Config(format!("no model named `{name}` in the config")))
    }

    /// Check everything that can be checked without doing real work.
    pub fn validate(&self) -> Result<()> {
        let world = self.world()?;
        self.corpus.validate(&world)?;
        self.train.validate()?;
        if self.models.is_empty() {
            return Err(CliError::Config("at least one [[models]] entry is required".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            let ok = !m.name.is_empty()
                && m.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return Err(CliError::Config(format!(
                    "model name `{}` must be nonempty and use only [A-Za-z0-9_-]",
                    m.name
                )));
            }
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return Err(CliError::Config(format!("duplicate model name `{}`", m.name)));
            }
            m.model_config(1).validate()?;
        }
        let a = &self.analysis;
        if a.n_bins == 0 || a.n_bins > world.n_countries() {
            return Err(CliError::Config(format!(
                "n_bins = {} must be between 1 and the country count {}",
                a.n_bins,
                world.n_countries()
            )));
        }
        if a.max_new == 0 || a.per_bin == 0 || a.batch_size == 0 || a.svd_top_k == 0 {
            return Err(CliError::Config(
                "max_new, per_bin, batch_size and svd_top_k must be at least 1".into(),
            ));
        }
        let grid = a.alpha_grid.values();
        if !grid.contains(&1.0) {
            return Err(CliError::Config("alpha_grid must contain 1.0".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config("alpha_grid values must be finite".into()));
        }
        if a.transfer_family == 0 || world.family(a.transfer_family).is_err() {
            return Err(CliError::Config(format!(
                "transfer_family = {} must name a second relation family",
                a.transfer_family
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[[models]]
name = "small"
n_layers = 1
n_heads = 2
d_model = 16
max_context = 48

[train]
steps = 10
batch_size = 4
lr = 0.001
warmup_steps = 2
min_lr_frac = 0.1
clip_norm = 1.0
beta1 = 0.9
beta2 = 0.98
eps = 1e-8
weight_decay = 0.0
log_every = 5
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.analysis, AnalysisConfig::default());
        assert_eq!(c.models[0].mlp_multiple, 4);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        let no_seed = MINIMAL.replacen("seed = 7", "", 1);
        assert!(matches!(PipelineConfig::from_toml(&no_seed), Err(CliError::Config(_))));
        let extra = format!("colour = 1\n{MINIMAL}");
        assert!(matches!(PipelineConfig::from_toml(&extra), Err(CliError::Config(_))));
    }

    #[test]
    fn range_grid_hits_unit_exactly() {
        let g = AlphaGrid::Range {
            start: -2.0,
            stop: 3.0,
            step: 0.1,
        }
        .values();
        assert_eq!(g, default_alpha_grid());
        let mut bad = PipelineConfig::from_toml(MINIMAL).unwrap();
        bad.analysis.alpha_grid = AlphaGrid::List(vec![0.0, 0.5]);
        assert!(matches!(bad.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let mut c = PipelineConfig::from_toml(MINIMAL).unwrap();
        c.models[0].n_heads = 3;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = PipelineConfig::from_toml(MINIMAL).unwrap();
        c.models.push(c.models[0].clone());
        assert!(c.validate().is_err());
    }
}
