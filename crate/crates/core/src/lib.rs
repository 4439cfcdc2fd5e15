//! Whole-network rank selection for SVD-based compression of convolutional
//! and fully-connected layers.
//!
//! The crate builds per-layer accuracy curves, relates total complexity to
//! an accuracy metric through equal-metric configurations, and searches
//! integer rank configurations under a complexity budget.

pub mod complexity;
pub mod curve;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod mapping;
pub mod metric;
pub mod network;
pub mod pchip;
pub mod pipeline;
pub mod search;

pub use complexity::{Budget, ComplexityMode, ComplexityModel};
pub use curve::{CurveKind, LayerCurve};
pub use error::{EncError, Result};
pub use eval::{AccuracyEvaluator, AnalyticOracle, DatasetFile, MiniDataset, MiniEvaluator};
pub use mapping::{build_mapping, enc_map_select, AccuracyTarget, MappingTable};
pub use metric::{CurveSet, MetricKind, NetworkMetric, NetworkScale};
pub use network::{Decomposition, LayerKind, LayerSpec, NetworkSpec, RankConfiguration};
pub use search::{
    enc_inf_select, enc_model_select, extract_candidates, limit_space, Candidate, CandidateSet, SearchOptions,
};
pub use pipeline::{run_pipeline, Evaluators, PipelineConfig, PipelineResult, RankFile, Strategy, Target};
