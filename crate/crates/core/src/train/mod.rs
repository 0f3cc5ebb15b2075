//! Synthetic data, optimization, evaluation, checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use ablation::{ablate, AblationReport, Family};
pub use checkpoint::{load, save, CheckpointError, LoadedCheckpoint};
pub use data::{read_jsonl, split, synthesize, write_jsonl, Sample, SyntheticDatasetSpec};
pub use metrics::{Confusion, Metrics};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, run, train, EpochRecord, History, PreparedSet, RunOutcome, TrainConfig, TrainError};
