//! Experiment harness shared by the command-line tool and the acceptance suite.

mod commands;
mod config;
mod data;
mod model;
mod train;

pub use commands::{
    evaluate, evaluate_ukf, EvalSettings, gen_data, levelsets, query_context, read_observations, sample_to_csv, slice_targets,
    temporal_kl, train_command, ukf_kl, Report,
};
pub use config::{DatasetMode, ExperimentConfig, ModelKind, Task};
pub use data::{slice_points, TaskData};
pub use model::{Checkpoint, Model, CHECKPOINT_VERSION};
pub use train::{batch_loss, train, train_with_log_file, TrainRun};
