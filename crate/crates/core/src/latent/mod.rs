//! Latent injection pipeline and its variants.

pub mod generate;
pub mod mode;
pub mod pipeline;
pub mod rollout;

pub use generate::{greedy_generate, GenerateOptions, InferenceModels};
pub use mode::{effective_context, InjectionMode};
pub use pipeline::{
    base_prefix_pass, coprocessor_pass, decode_pass, run_schedule, soft_embedding_pass, AheadLogits, LatentBlock,
    Models, PassCounter, SoftTokenBank,
};
pub use rollout::{rollout_speedup, sequential_rollout, THREE_PASS};
