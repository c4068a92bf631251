//! Two-stage confidence-guided multi-omics graph learning.
//!
//! Stage 1 ([`evidence`]) learns per-sample modality confidences from
//! Dirichlet evidence heads. Stage 2 ([`fusion`], [`graph`], [`gnn`])
//! fuses modality tokens under those frozen confidences and classifies
//! patients with GraphSAGE on a consistency-intersection k-NN graph.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod special;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use config::{GraphConfig, RunConfig};
pub use data::{FoldSplit, OmicsDataset, SyntheticSpec};
pub use error::{CmglError, ErrorKind, Result};
pub use eval::{MetricsReport, RunReport, Variant};
pub use evidence::{ConfidenceTable, Stage1Config};
pub use fusion::FusionConfig;
pub use gnn::Stage2Config;
pub use graph::EdgeSet;
pub use tape::Mat;
