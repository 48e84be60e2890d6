//! Simulated-teacher experiments: pre-training representations, learning
//! held-out rewards on top of them, evaluation, aggregation over seeds and
//! export of tables and plots.

pub mod config;
pub mod export;
pub mod metrics;
pub mod pointcloud;
pub mod run;

pub use config::{workers_from_env, ExperimentConfig, ExperimentPlan, HyperSet, Method, WORKERS_ENV};
pub use export::{emit_plots, export, render_report, Manifest, MANIFEST_FILE, RESULT_FILE};
pub use metrics::{evaluable_pairs, mean_se, metric_mse, metric_reward_accuracy};
pub use pointcloud::{pointcloud, spread_levels, CloudSource, PointCloud, DEFAULT_CLOUD_POINTS, DISPLAY_CONTEXTS, SERVICE_CLOUD_POINTS};
pub use run::{reproduces, run_cell, run_experiment, run_experiment_with, Aggregate, ExperimentResult, FeatureAggregate, LowDataRow, RewardRecord, SeedResult};
