//! Training, two-stage inference, evaluation, ablations and checkpoint
//! persistence.

pub mod ablation;
pub mod config;
pub mod container;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use ablation::{run_ablation, AblationConfig, AblationReport, Arm};
pub use config::{RunConfig, Seeds, TrainConfig};
pub use container::Container;
pub use optim::{AdamConfig, AdamState};
pub use pipeline::{evaluate, spectrum_report, train_sharpener, Pipeline};
pub use train::{train, train_from, Checkpoint, Example};
