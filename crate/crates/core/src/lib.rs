//! Decoder-transformer inference on CPU with position-agnostic KV-cache selection.
//!
//! Every attention step runs in two phases. First, the un-rotated query is scored
//! against the middle of a position-free KV cache and the best entries are voted
//! and expanded into spans. Second, the selected spans are concatenated between
//! the global (attention-sink) and local (recent) segments, rotary positions are
//! applied sequentially over that compact scope, and ordinary causal
//! self-attention runs over it. The attention scope never exceeds the model's
//! pretraining window, so generation can continue far past it.
//!
//! Modules, bottom-up:
//! - [`numerics`]: softmax, rotary tables, streaming attention, entropy
//! - [`kv_cache`]: segmented position-free cache (global / middle / local)
//! - [`selection`]: fused streaming top-k scoring, voting, span expansion
//! - [`reattention`]: scope assembly, per-layer attention step, prefill/decode engine
//! - [`model`]: toy decoder-only transformer, weight init and file I/O
//! - [`harness`]: experiment drivers behind the `reattn` CLI

pub mod error;
pub mod harness;
pub mod kv_cache;
pub mod model;
pub mod numerics;
pub mod reattention;
pub mod selection;

pub use error::{Error, Result};
pub use kv_cache::SegmentedKvCache;
pub use model::{AttentionMode, ModelConfig, ModelWeights};
pub use reattention::{AttentionScope, Engine, EngineStats};
pub use selection::{SelectionConfig, SpanAlignment, SpanSet};
