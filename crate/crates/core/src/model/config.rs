use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional encoding scheme. Only rotary is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    #[default]
    Rotary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub positional: PositionalScheme,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_positions: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            max_positions,
            positional: PositionalScheme::Rotary,
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{}", field), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("{} heads do not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("rotary needs an even head dimension, got {}", self.head_dim()),
            ));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::config(
                "model.rope_base",
                format!("must be a finite value above 1, got {}", self.rope_base),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Checks that an effective context fits in the position table.
    pub fn check_context(&self, effective: usize) -> Result<()> {
        if effective > self.max_positions {
            return Err(Error::config(
                "model.max_positions",
                format!(
                    "effective context {} exceeds max_positions {}",
                    effective, self.max_positions
                ),
            ));
        }
        Ok(())
    }
}
