//! Streaming token compression for video encoders.
//!
//! Two stages sit between a frame stream and a downstream language model:
//!
//! * [`cacher`] keeps per-layer activations of a periodic reference frame and
//!   recomputes only the tokens whose keys moved the most.
//! * [`pruner`] scores encoded tokens against a temporal anchor (mean of recent
//!   frames) and a spatial anchor (mean of the current frame) and keeps the
//!   most novel ones.
//!
//! [`vit`] is the encoder both stages operate on, [`stream`] produces and
//! stores frame streams, and [`harness`] ties everything into measured runs.
//! Kernels run on rayon when the `parallel` feature is enabled and
//! [`Execution::Parallel`] is selected; results are bitwise identical either way.

pub mod cacher;
pub mod error;
pub mod exec;
pub mod harness;
pub mod numerics;
pub mod pruner;
pub mod stream;
pub mod vit;

pub use cacher::{
    flop_count_selective, identify_dynamic_tokens, selective_layer_forward, CacheInterval,
    CacherConfig, CacherState, FrameStats, ReuseScope, SimilarityBasis,
};
pub use error::{Result, StcError};
pub use exec::Execution;
pub use harness::{
    analyze_redundancy, bench, emit_report, process_stream, run_pipeline, MetricsReport,
    OutputFormat, RedundancyProfile, RunConfig,
};
pub use numerics::{IndexSet, Matrix, SimilarityMetric};
pub use pruner::{prune, score_tokens, PruneResult, PrunerConfig, PrunerState};
pub use stream::{chunk_stream, generate_stream, StreamConfig, SyntheticStream};
pub use vit::{flop_count_full, Encoder, EncoderConfig, ForwardResult};
