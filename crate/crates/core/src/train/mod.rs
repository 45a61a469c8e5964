//! Training, evaluation and the artifacts they produce.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod optim;
pub mod report;
pub mod sampler;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use export::EmbeddingIndex;
pub use report::EvalReport;
pub use trainer::{EpochRecord, EpochStats, Trainer};
