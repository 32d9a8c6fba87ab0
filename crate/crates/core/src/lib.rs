//! A desk-scale laboratory for KV-cache compression.
//!
//! - [`tinyformer`]: deterministic toy transformer with an explicit cache and
//!   a generation loop driven by a pluggable retention policy.
//! - [`kvcache`]: cache data model, budgets and retention.
//! - [`policies`]: ShotKV and the StreamingLLM, H2O, SnapKV, PyramidKV and
//!   ChunkKV baselines.
//! - [`analysis`]: cumulative attention-mass curves and heatmaps.
//! - [`traceio`]: the `KVTR` attention-trace file format.
//! - [`harness`]: ratio sweeps, ΔP, benchmarks and plots.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod policies;
pub mod tinyformer;
pub mod traceio;

pub use error::{Error, Result};
pub use kvcache::{budget_tokens, Budget, KVCacheSet, RetainedSet, Scope, Segment};
pub use policies::{PolicyConfig, PolicyKind, PolicyParams, ShotSegmentation};
pub use tinyformer::{Model, ModelConfig, TokenSequence};
pub use traceio::{AttentionTrace, TraceMeta, TraceMode};
