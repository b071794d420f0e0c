//! Sampling, loss terms, the joint optimization loop and checkpoints.

mod checkpoint;
mod config;
pub mod losses;
mod sampling;
mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use losses::{centroid_loss, classification_loss, regression_loss, total_loss, CentroidTerm};
pub use sampling::{sample_batch, ShiftSample};
pub use trainer::{
    train_loop, write_history_csv, BatchOutcome, HistoryRow, LossBreakdown, TrainOutcome, Trainer, CHECKPOINT_FILE,
    HISTORY_FILE,
};
