//! Retrieval post-processing: clustering, query expansion, candidate
//! filters, k-reciprocal re-ranking and a pipeline composing them.

mod dbscan;
mod filters;
mod pipeline;
mod rerank;

pub use dbscan::{dbscan, dbscan_with_similarity, ClusterAssignment, DbscanConfig, NOISE};
pub use filters::{camera_verification, query_expansion, temporal_filter, FilterStats, TemporalFilterConfig};
pub use pipeline::{pipeline, PipelineConfig, PipelineInputs, PipelineOutput, Step, StepReport, ViewSet};
pub use rerank::{k_reciprocal_distances, k_reciprocal_rerank, RerankConfig};
