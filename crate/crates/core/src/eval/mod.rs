//! Evaluation: metrics, cross-validation, ablations, sweeps, export and
//! clustering.

pub mod cluster;
pub mod cv;
pub mod export;
pub mod grid;
pub mod metrics;

pub use cluster::{kmeans, silhouette};
pub use cv::{run_ablation, run_cv, run_fold, run_subsample, RunReport, Variant};
pub use export::export_embeddings;
pub use grid::run_grid;
pub use metrics::{compute_metrics, MetricsReport};
