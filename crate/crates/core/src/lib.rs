//! Event-assisted visual token pruning.
//!
//! An event stream (recorded, or simulated from frames) drives keyframe
//! sampling and per-token motion saliency; saliency is then fused with
//! attention importance in rank space to prune visual tokens layer by layer.
//! Bias statistics, synthetic attention fixtures and an analytical cost model
//! support analysis of the result.

pub mod attention;
pub mod attention_sim;
pub mod bias;
pub mod config;
pub mod earf;
pub mod emsf;
pub mod error;
pub mod esim;
pub mod etcs;
pub mod event;
pub mod flops;
pub mod pipeline;
pub mod stats;

pub use attention::{AttentionMap, QuerySelection, VisualSlot};
pub use config::PipelineConfig;
pub use error::{Error, ErrorKind, Result};
pub use event::{Event, EventStream, Polarity};
pub use pipeline::{run_pipeline, PipelineOutcome, PruneResult};
