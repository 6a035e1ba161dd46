//! Training harness: data ingestion, batching, optimization, checkpoints.

mod checkpoint;
mod config;
mod data;
mod manifest;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{OptimizerKind, TrainConfig};
pub use data::{epoch_batches, make_batch, Batch, Dataset, Example};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use optim::{clip_grad_norm, AdamW};
pub use train::{step_rng, train, train_step, StepStats, TrainSummary, Trainer, CHECKPOINT_FILE, DEV_LOG, TRAIN_LOG};
