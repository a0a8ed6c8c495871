//! Objective, training loop, metrics, gradient checking, and the
//! ablation/sweep harness.

pub mod ablation;
pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use ablation::{ablation_configs, ablation_run, run_all, sweep, sweep_configs, RunRow, RunTable};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use gradcheck::{check, gradient_suite, GradCheckReport, GradDims, Tolerance};
pub use loss::{total_loss, LossBreakdown, LossTerms};
pub use metrics::{Confusion, EpochRecord, MetricsReport};
pub use trainer::{evaluate, predict, train, train_with_progress, Prediction, TrainOutcome};
