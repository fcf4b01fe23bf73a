//! TOML run configuration.

use std::path::{Path, PathBuf};

use latentkv::error::{Error, Result};
use latentkv::latent::InjectionMode;
use latentkv::model::ModelConfig;
use latentkv::tasks::VOCAB_SIZE;
use latentkv::train::{CurriculumConfig, OptimizerConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Plain text, from `task.path` or synthesised.
    Corpus,
    Countdown,
    GraphQa,
    /// Chain-of-thought records in JSONL at `task.path`.
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub path: Option<PathBuf>,
    /// Size of the synthetic corpus when no path is given.
    pub synthetic_bytes: usize,
    pub operands: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub depth: usize,
    pub width: usize,
    /// Countdown is normally trained without a curriculum.
    pub allow_countdown_curriculum: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Corpus,
            path: None,
            synthetic_bytes: 200_000,
            operands: 3,
            train_examples: 2000,
            eval_examples: 200,
            depth: 3,
            width: 3,
            allow_countdown_curriculum: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pretraining stops once this many sequence tokens were consumed.
    pub token_budget: u64,
    pub batch_size: usize,
    /// Validation perplexity every this many steps (and at the end).
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Finetuning epochs (per stage when a curriculum is present).
    pub epochs: usize,
    /// Held-out windows for validation perplexity.
    pub eval_sequences: usize,
    /// Plain language-model tokens used to warm-start the Base.
    pub warm_start_tokens: u64,
    pub warm_start_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_budget: 100_000,
            batch_size: 8,
            eval_every: 50,
            checkpoint_every: 200,
            epochs: 3,
            eval_sequences: 16,
            warm_start_tokens: 0,
            warm_start_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mode name or alias (`liu`, `hyp1`, `hyp2`, `soft`).
    pub mode: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub curriculum: Option<CurriculumConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub n_latents: Option<usize>,
    pub operands: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = &o.mode {
            self.mode = m.clone();
        }
        if let Some(n) = o.n_latents {
            self.schedule.n_latents = n;
        }
        if let Some(n) = o.operands {
            self.task.operands = n;
        }
        if let Some(p) = &o.out {
            self.paths.out = p.clone();
        }
    }

    pub fn mode(&self) -> Result<InjectionMode> {
        let mode: InjectionMode = self.mode.parse()?;
        if !InjectionMode::TRAINABLE.contains(&mode) {
            return Err(Error::config("mode", format!("{} cannot be trained", mode)));
        }
        Ok(mode)
    }

    /// Latents per site: the curriculum total when one is configured.
    pub fn n_latents(&self) -> usize {
        self.curriculum
            .as_ref()
            .map_or(self.schedule.n_latents, |c| c.total_latents())
    }

    /// Cross-field checks shared by every command; runs before any allocation.
    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.model.validate()?;
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(Error::config(
                "model.vocab_size",
                format!(
                    "must cover the {} byte-level tokens, got {}",
                    VOCAB_SIZE, self.model.vocab_size
                ),
            ));
        }
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if let Some(c) = &self.curriculum {
            c.validate(c.total_latents())?;
            if self.schedule.n_latents != c.total_latents() {
                return Err(Error::config(
                    "curriculum",
                    format!(
                        "stages * latents_per_stage = {} but schedule.n_latents = {}",
                        c.total_latents(),
                        self.schedule.n_latents
                    ),
                ));
            }
        }
        match self.task.kind {
            TaskKind::Corpus => {
                self.schedule.validate()?;
                let span = self.schedule.seq_len + self.schedule.n_latents + self.schedule.n_ahead;
                self.model.check_context(span)?;
                if self.task.path.is_none() && self.task.synthetic_bytes < 2 * self.schedule.seq_len {
                    return Err(Error::config(
                        "task.synthetic_bytes",
                        "corpus must hold at least two windows",
                    ));
                }
            }
            TaskKind::Countdown => {
                if !(3..=5).contains(&self.task.operands) {
                    return Err(Error::config("task.operands", "must lie in 3..=5"));
                }
                if self.curriculum.is_some() && !self.task.allow_countdown_curriculum {
                    return Err(Error::config(
                        "curriculum",
                        "Countdown is trained without a curriculum; set task.allow_countdown_curriculum to override",
                    ));
                }
            }
            TaskKind::GraphQa | TaskKind::Jsonl => {
                if self.task.kind == TaskKind::Jsonl && self.task.path.is_none() {
                    return Err(Error::config("task.path", "jsonl tasks need a path"));
                }
                if self.curriculum.is_none() {
                    return Err(Error::config("curriculum", "required for chain-of-thought tasks"));
                }
            }
        }
        if self.task.kind != TaskKind::Corpus && (self.task.train_examples == 0 || self.task.eval_examples == 0) {
            return Err(Error::config(
                "task",
                "train_examples and eval_examples must be positive",
            ));
        }
        Ok(())
    }
}
