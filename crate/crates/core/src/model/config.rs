// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// MLP hidden width as a multiple of `d_model`.
    #[serde(default = "default_mlp_multiple")]
    pub mlp_multiple: usize,
}

fn default_mlp_multiple() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
            ("mlp_multiple", self.mlp_multiple),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_multiple
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_shape_is_representable() {
        let cfg = ModelConfig {
            n_layers: 24,
            n_heads: 16,
            d_model: 2048,
            vocab_size: 50_304,
            max_context: 2048,
            mlp_multiple: 4,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.n_total_heads(), 384);
        assert_eq!(cfg.d_head(), 128);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 3,
            d_model: 32,
            vocab_size: 10,
            max_context: 8,
            mlp_multiple: 4,
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig { n_layers: 0, n_heads: 2, ..cfg }.validate().is_err());
    }
}
