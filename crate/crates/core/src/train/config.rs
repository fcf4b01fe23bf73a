use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of latent augmentation within each training sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Sequence length S.
    pub seq_len: usize,
    /// Augmentation sites per sequence M.
    pub n_sites: usize,
    /// Latents per site N_L.
    pub n_latents: usize,
    /// Ahead tokens per site N_A.
    pub n_ahead: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScheduleConfig {
    /// Site windows must fit inside the first `S - 1` tokens so every ahead
    /// token has a next-token target.
    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 1 {
            return Err(Error::config("schedule.n_sites", "must be at least 1"));
        }
        if self.n_ahead < 1 {
            return Err(Error::config("schedule.n_ahead", "must be at least 1"));
        }
        let need = self.n_sites * self.n_ahead + 2;
        if self.seq_len < need {
            return Err(Error::config(
                "schedule.seq_len",
                format!(
                    "{} sites with {} ahead tokens need seq_len >= {}, got {}",
                    self.n_sites, self.n_ahead, need, self.seq_len
                ),
            ));
        }
        Ok(())
    }

    pub fn effective_context(&self) -> usize {
        crate::latent::effective_context(self.seq_len, self.n_sites, self.n_latents, self.n_ahead)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Number of stages k.
    pub stages: usize,
    /// Latents added per stage c.
    pub latents_per_stage: usize,
    pub epochs_per_stage: usize,
}

impl CurriculumConfig {
    pub fn total_latents(&self) -> usize {
        self.stages * self.latents_per_stage
    }

    pub fn validate(&self, n_latents: usize) -> Result<()> {
        if self.stages < 1 || self.latents_per_stage < 1 {
            return Err(Error::config(
                "curriculum",
                "stages and latents_per_stage must be positive",
            ));
        }
        if self.epochs_per_stage < 1 {
            return Err(Error::config("curriculum.epochs_per_stage", "must be positive"));
        }
        if self.total_latents() != n_latents {
            return Err(Error::config(
                "curriculum",
                format!(
                    "stages * latents_per_stage = {} but the run uses {} latents",
                    self.total_latents(),
                    n_latents
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("optimizer.lr", self.lr > 0.0 && self.lr.is_finite()),
            ("optimizer.beta1", (0.0..1.0).contains(&self.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&self.beta2)),
            ("optimizer.eps", self.eps > 0.0),
            ("optimizer.weight_decay", self.weight_decay >= 0.0),
            ("optimizer.grad_clip", self.grad_clip >= 0.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(field, "out of range"));
            }
        }
        Ok(())
    }

    /// Linear warmup to `lr`, constant afterwards. `step` counts from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step.min(self.warmup_steps) as f64 / self.warmup_steps as f64)
        }
    }
}
