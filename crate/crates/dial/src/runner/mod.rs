//! Experiment orchestration: configuration, the SGD training loop,
//! statistics freezing, evaluation, the lambda sweep, the ablation grid,
//! and the gradient checker behind the `gradcheck` command.

pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{DatasetSpec, ExperimentConfig};
pub use gradcheck::{grad_check, grad_check_core, GradCheckReport};
pub use optim::{lr_at, sgd_step, OptimizerState};
pub use sweep::{ablate, ablate_csv, sweep_csv, sweep_lambda, AblationCell, AblationTable, SweepRow};
pub use train::{evaluate, freeze_stats, train, write_metrics, MetricsRecord, TrainOutput};
