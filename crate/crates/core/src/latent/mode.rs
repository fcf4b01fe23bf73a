use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How latents reach the Base model, and which weights train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Latents enter the Base as input embeddings; Base frozen.
    EmbeddingFrozenBase,
    /// Coprocessor cache rows are appended to the Base cache; Base frozen.
    CacheConcatFrozenBase,
    /// Embedding injection with Base and Coprocessor trained jointly.
    EmbeddingCofinetuned,
    /// One model; soft tokens are fed directly into the latent slots.
    SoftEmbeddingUnified,
    /// Sequential continuous thoughts, for pass accounting only.
    SequentialRollout,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 5] = [
        InjectionMode::EmbeddingFrozenBase,
        InjectionMode::CacheConcatFrozenBase,
        InjectionMode::EmbeddingCofinetuned,
        InjectionMode::SoftEmbeddingUnified,
        InjectionMode::SequentialRollout,
    ];

    /// Modes with a training loop.
    pub const TRAINABLE: [InjectionMode; 4] = [
        InjectionMode::EmbeddingFrozenBase,
        InjectionMode::CacheConcatFrozenBase,
        InjectionMode::EmbeddingCofinetuned,
        InjectionMode::SoftEmbeddingUnified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EmbeddingFrozenBase => "embedding_frozen_base",
            Self::CacheConcatFrozenBase => "cache_concat_frozen_base",
            Self::EmbeddingCofinetuned => "embedding_cofinetuned",
            Self::SoftEmbeddingUnified => "soft_embedding_unified",
            Self::SequentialRollout => "sequential_rollout",
        }
    }

    pub fn base_trainable(self) -> bool {
        matches!(self, Self::EmbeddingCofinetuned | Self::SoftEmbeddingUnified)
    }

    pub fn has_coprocessor(self) -> bool {
        matches!(
            self,
            Self::EmbeddingFrozenBase | Self::CacheConcatFrozenBase | Self::EmbeddingCofinetuned
        )
    }

    pub fn uses_bank(self) -> bool {
        !matches!(self, Self::SequentialRollout)
    }

    /// Whether latents enter the Base as input rows (as opposed to cache rows).
    pub fn injects_embeddings(self) -> bool {
        matches!(
            self,
            Self::EmbeddingFrozenBase | Self::EmbeddingCofinetuned | Self::SoftEmbeddingUnified
        )
    }

    /// Full forward passes per training step.
    pub fn passes_per_step(self, n_latents: usize) -> usize {
        match self {
            Self::SoftEmbeddingUnified => 2,
            Self::SequentialRollout => n_latents + 1,
            _ => 3,
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "embedding_frozen_base" | "liu" => Self::EmbeddingFrozenBase,
            "cache_concat_frozen_base" | "hyp1" => Self::CacheConcatFrozenBase,
            "embedding_cofinetuned" | "hyp2" => Self::EmbeddingCofinetuned,
            "soft_embedding_unified" | "soft" => Self::SoftEmbeddingUnified,
            "sequential_rollout" | "rollout" => Self::SequentialRollout,
            other => {
                return Err(Error::config(
                    "mode",
                    format!(
                        "unknown injection mode {:?}; expected one of liu, hyp1, hyp2, soft, rollout",
                        other
                    ),
                ))
            }
        };
        Ok(mode)
    }
}

/// Training cost proxy: tokens seen by the Base per example.
pub fn effective_context(seq_len: usize, n_sites: usize, n_latents: usize, n_ahead: usize) -> usize {
    seq_len + n_sites * (n_latents + n_ahead)
}
