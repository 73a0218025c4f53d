//! Two-dimensional KV-cache compression.
//!
//! Layers are profiled during prefill by how much self-attention moves each
//! token's embedding (cosine similarity before/after the attention block),
//! clustered into three groups, and the group whose embeddings barely move
//! donates part of its per-layer token budget to the others. A sequence-wise
//! eviction policy then enforces each layer's own budget while decoding.
//!
//! The crate is organised bottom-up:
//!
//! * [`kv_model`] – model/run shapes, cache occupancy, byte accounting.
//! * [`profiler`] – cosine profiling and the binary prefill trace format.
//! * [`grouping`] – 1-D three-way clustering and budget reallocation.
//! * [`eviction`] – sliding window, StreamingLLM and heavy-hitter policies.
//! * [`simulator`] – a deterministic toy decoder that drives everything.

pub mod error;
pub mod eviction;
pub mod grouping;
pub mod kv_model;
pub mod profiler;
pub mod simulator;

pub use error::{Error, Result};
pub use eviction::EvictionPolicy;
pub use grouping::{allocate_budgets, cluster_layers, BudgetPlan, LayerGroups};
pub use kv_model::{kv_cache_bytes, kv_cache_bytes_actual, KvCacheState, ModelShape, SimConfig};
pub use profiler::{cosine_similarity, profile_layers, CosineProfile, PrefillTrace};
pub use simulator::{simulate_decode, toy_prefill, DecodeMode, SimReport, ToyModelSpec};
