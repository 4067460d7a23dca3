//! Entropy-guided visual token selection with KV-cache reuse.
//!
//! Each step of a rollout scores every visual token two ways: the Shannon
//! entropy of its gray-level histogram, and how concentrated the text tokens'
//! cross-attention on it is. A timestep schedule splits a token budget between
//! the two rankings, and the union of both top-k sets marks the important
//! tokens. Patches that did not change since the previous frame and are not
//! important keep their cached keys and values instead of being projected
//! again.
//!
//! Modules, bottom up:
//!
//! - [`ingest`]: frames, grayscale conversion, patch grid, histograms, PGM/PNG input
//! - [`entropy`]: visual entropy and attention information scores
//! - [`selection`]: schedule, top-k, static detection, token sets
//! - [`kv`]: attention layer with a per-token KV cache
//! - [`metrics`]: cost model and run report
//! - [`pipeline`], [`synth`], [`overlay`], [`config`]: the command-line driver

pub mod config;
pub mod container;
pub mod entropy;
pub mod error;
pub mod ingest;
pub mod kv;
pub mod metrics;
pub mod overlay;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use config::{AttentionSource, RunConfig};
pub use entropy::{AttentionTensor, EntropyScores};
pub use error::{Error, Result};
pub use ingest::{Frame, GrayHistogram, PatchGrid};
pub use kv::{KvCacheState, KvEngine, ProjectionWeights};
pub use metrics::{CostModel, RunReport};
pub use pipeline::{run_pipeline, Rollout};
pub use selection::{ScheduleParams, SelectionMode, TokenSets};
pub use synth::{Scene, SceneSpec};
