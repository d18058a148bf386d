//! End-to-end training: configuration, the training loop, metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod trainer;

pub use config::{RunConfig, ABLATIONS};
pub use metrics::{MetricsRow, RunSummary};
pub use trainer::{EvalSummary, Trainer};
