//! Decoder-only transformer with explicit per-layer key/value caches.

pub mod cache;
pub mod config;
pub mod mask;
pub mod params;
pub mod plan;
pub mod transformer;

pub use cache::{concat_cache, CacheOrigin, LayerCache, ModelCache};
pub use config::{ModelConfig, PositionalScheme};
pub use mask::{build_attention_mask, permits, AttentionMask, PassKind};
pub use params::{BoundLayer, BoundModel, LayerParams, ModelParams, Role, INIT_STD};
pub use plan::{AheadSource, AugmentationPlan, SlotRole};
pub use transformer::{embed_tokens, forward, forward_tokens, ForwardOutput};
