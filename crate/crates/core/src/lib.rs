//! Desk-scale laboratory for KV-cache compression as a perturbation of
//! attention routing.
//!
//! The crate models cache eviction as a survival mask over (layer, KV head,
//! position), turns attention into a labeled token-routing graph, and
//! measures what compression does to reachability, head consensus, and a
//! retrieval-style readout. A small deterministic multi-head model with
//! grouped KV heads supplies attention tensors and hidden states; real
//! attention dumps can be loaded from a binary format instead.
//!
//! Module map:
//! - [`config`]: model/sweep configuration and exact KV memory arithmetic.
//! - [`attention`]: the toy causal model, forward passes, attention tensors.
//! - [`dump`]: binary attention dump format (save/load).
//! - [`mask`]: survival masks, the unit of compression.
//! - [`press`]: eviction scoring and the chunked/adaptive press policies.
//! - [`graph`]: token routing graphs, reachability, route capacity, tickets.
//! - [`metrics`]: eviction/reachability/consensus metrics and grading.
//! - [`synthdata`]: template datasets, tagging, span alignment, ingestion.
//! - [`sweep`]: the end-to-end press/measure/grade pipeline per example.
//! - [`probe`]: linear probing of pooled hidden states.
//! - [`propositions`]: executable checks of the three routing claims.
//! - [`tol`]: the numeric tolerances the test suite pins.

pub mod attention;
pub mod config;
pub mod dump;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod press;
pub mod probe;
pub mod propositions;
pub mod sweep;
pub mod synthdata;
pub mod tol;

pub use attention::{AttentionTensor, ConsensusProfile, ForwardOutput, HiddenStates, ToyModel};
pub use config::{kv_memory_bytes, ConfigError, ModelConfig};
pub use graph::{ReachabilitySet, TokenRouteGraph};
pub use mask::{PressKind, Regime, SurvivalMask};
pub use metrics::{Grade, MetricReport, SweepRecord};
pub use press::{press_adaptive, press_chunk, score_expected_attention, ScoreTensor};
pub use sweep::{sweep_example, SweepSettings};
pub use synthdata::{EntityPool, QAPair, SynthExample, Task};
