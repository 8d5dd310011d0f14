//! Abstract probabilistic model extraction from per-token hidden-state traces.
//!
//! The pipeline reduces concrete states with PCA, partitions them into
//! abstract states, fits a DTMC or HMM over the abstract traces, binds
//! trustworthiness semantics to the abstraction and scores both the model
//! and its detection power.

pub mod config;
pub mod detection;
pub mod error;
pub mod hmm;
pub mod markov;
pub mod metrics_model;
pub mod metrics_semantics;
pub mod partition;
pub mod pipeline;
pub mod reduction;
pub mod semantics;
pub mod serde_blocks;
pub mod sweep;
pub mod synth;
pub mod trace_store;

pub use config::{AnalysisDefaults, ModelConfig, PartitionConfig, PipelineConfig};
pub use error::{Error, ErrorKind, Result, Stage};
pub use pipeline::{render_bundle, run_pipeline, write_bundle, RunReport};
pub use sweep::{run_sweep, write_sweep, SweepGrid, SweepResult};
pub use synth::{synth_generate, SyntheticSourceSpec};
pub use trace_store::{read_container, write_container, Trace, TraceContainer};
