use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dbscan::{dbscan, DbscanConfig};
use super::filters::{camera_verification, query_expansion, temporal_filter, FilterStats, TemporalFilterConfig};
use super::rerank::{k_reciprocal_rerank, RerankConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, judgments_from_meta, EvalConfig, RelevanceJudgment};
use crate::retrieval::{
    aggregate_views, ensemble_concat, rank_gallery, EmbeddingMeta, EmbeddingStore, RankingResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Aggregate,
    Ensemble,
    QueryExpansion,
    CameraVerification,
    TemporalFilter,
    Rerank,
}

impl Step {
    /// Crop averaging, ensemble, query expansion, camera verification,
    /// re-ranking.
    pub const STANDARD_ORDER: [Step; 5] = [
        Step::Aggregate,
        Step::Ensemble,
        Step::QueryExpansion,
        Step::CameraVerification,
        Step::Rerank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Aggregate => "aggregate",
            Step::Ensemble => "ensemble",
            Step::QueryExpansion => "query_expansion",
            Step::CameraVerification => "camera_verification",
            Step::TemporalFilter => "temporal_filter",
            Step::Rerank => "rerank",
        }
    }

    /// Parse a comma-separated step list; short aliases `qe`, `camver` and
    /// `temporal` are accepted.
    pub fn parse_list(s: &str) -> Result<Vec<Step>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Step::from_str)
            .collect()
    }
}

impl FromStr for Step {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "aggregate" => Step::Aggregate,
            "ensemble" => Step::Ensemble,
            "query_expansion" | "qe" => Step::QueryExpansion,
            "camera_verification" | "camver" => Step::CameraVerification,
            "temporal_filter" | "temporal" => Step::TemporalFilter,
            "rerank" => Step::Rerank,
            other => return Err(Error::config(format!("unknown post-processing step {other:?}"))),
        })
    }
}

/// Embeddings for one side of the retrieval problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    /// `models[m][i][v]` is view `v` of sample `i` under model `m`.
    pub models: Vec<Vec<Vec<Vec<f64>>>>,
    pub meta: Vec<EmbeddingMeta>,
    /// Camera cluster per sample; defaults to the camera ids in `meta`.
    pub cam_clusters: Option<Vec<Option<i64>>>,
}

impl ViewSet {
    /// A single model with a single view per sample.
    pub fn from_store(store: &EmbeddingStore) -> Self {
        ViewSet {
            models: vec![(0..store.len()).map(|i| vec![store.row_f64(i)]).collect()],
            meta: store.meta().to_vec(),
            cam_clusters: None,
        }
    }

    fn validate(&self, side: &str) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::data(format!("{side}: no model embeddings")));
        }
        for (m, samples) in self.models.iter().enumerate() {
            if samples.len() != self.meta.len() {
                return Err(Error::data(format!(
                    "{side}: model {m} has {} samples, metadata has {}",
                    samples.len(),
                    self.meta.len()
                )));
            }
            if let Some(i) = samples.iter().position(Vec::is_empty) {
                return Err(Error::data(format!("{side}: sample {i} of model {m} has no views")));
            }
        }
        if let Some(c) = &self.cam_clusters {
            if c.len() != self.meta.len() {
                return Err(Error::Dimension {
                    expected: self.meta.len(),
                    got: c.len(),
                    context: "camera clusters vs samples",
                });
            }
        }
        Ok(())
    }

    fn cams(&self) -> Vec<Option<i64>> {
        match &self.cam_clusters {
            Some(c) => c.clone(),
            None => self.meta.iter().map(|m| m.camera_id).collect(),
        }
    }

    fn timestamps(&self) -> Vec<Option<i64>> {
        self.meta.iter().map(|m| m.timestamp).collect()
    }

    /// Build a normalized store: views are averaged when `aggregate` is set
    /// (otherwise the first view is used), models concatenated when
    /// `ensemble` is set (otherwise the first model is used).
    fn materialize(&self, aggregate: bool, ensemble: bool) -> Result<EmbeddingStore> {
        let models = if ensemble { &self.models[..] } else { &self.models[..1] };
        let rows = (0..self.meta.len())
            .map(|i| {
                let parts = models
                    .iter()
                    .map(|m| {
                        if aggregate {
                            aggregate_views(&m[i])
                        } else {
                            Ok(m[i][0].clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                ensemble_concat(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingStore::from_rows(&rows, self.meta.clone())?.normalized()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    pub query: ViewSet,
    pub gallery: ViewSet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dbscan: DbscanConfig,
    /// Include the query itself in the expansion mean.
    pub qe_inclusive: bool,
    pub temporal: TemporalFilterConfig,
    pub rerank: RerankConfig,
    /// Evaluate after every step using identity labels from the metadata.
    pub eval: Option<EvalConfig>,
}

/// State after one pipeline step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: String,
    /// Candidate entries summed over queries.
    pub candidates: usize,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    /// Queries left with no candidates.
    pub empty_queries: usize,
    pub filter_stats: Option<FilterStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub ranking: RankingResult,
    /// The base ranking first, then one entry per step.
    pub reports: Vec<StepReport>,
}

/// Apply `steps` in order. Aggregation and ensembling choose how features
/// are built and must come before query expansion. Filters remove
/// candidates for good; re-ranking, once enabled, is applied to every later
/// ranking.
pub fn pipeline(inputs: &PipelineInputs, steps: &[Step], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    inputs.query.validate("query")?;
    inputs.gallery.validate("gallery")?;
    if inputs.query.models.len() != inputs.gallery.models.len() {
        return Err(Error::data("query and gallery use different model counts"));
    }
    if inputs.gallery.meta.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    let judgments: Option<Vec<RelevanceJudgment>> = cfg
        .eval
        .as_ref()
        .map(|e| judgments_from_meta(&inputs.query.meta, &inputs.gallery.meta, e.protocol));
    let nq = inputs.query.meta.len();
    let ng = inputs.gallery.meta.len();

    let mut aggregate = false;
    let mut ensemble = false;
    let mut expanded = false;
    let mut rerank = false;
    let mut keep = vec![vec![true; ng]; nq];
    let mut applied: Vec<String> = Vec::new();
    let mut query = inputs.query.materialize(false, false)?;
    let mut gallery = inputs.gallery.materialize(false, false)?;

    let rank = |q: &EmbeddingStore, g: &EmbeddingStore, rerank: bool, keep: &[Vec<bool>]| -> Result<RankingResult> {
        let mut r = if rerank {
            k_reciprocal_rerank(q, g, &cfg.rerank)?
        } else {
            rank_gallery(q, g)?
        };
        for (qr, k) in r.queries.iter_mut().zip(keep) {
            qr.retain(|g| k[g]);
        }
        Ok(r)
    };
    let report = |name: &str, r: &RankingResult, stats: Option<FilterStats>| -> Result<StepReport> {
        let eval = match (&cfg.eval, &judgments) {
            (Some(e), Some(j)) => Some(evaluate(r, j, e)?),
            _ => None,
        };
        Ok(StepReport {
            step: name.to_string(),
            candidates: r.queries.iter().map(|q| q.len()).sum(),
            map: eval.as_ref().map(|e| e.map),
            rank1: eval.as_ref().map(|e| e.rank1()),
            empty_queries: r.queries.iter().filter(|q| q.is_empty()).count(),
            filter_stats: stats,
        })
    };

    let mut current = rank(&query, &gallery, rerank, &keep)?;
    let mut reports = vec![report("base", &current, None)?];
    for &step in steps {
        let mut stats = None;
        match step {
            Step::Aggregate | Step::Ensemble => {
                if expanded {
                    return Err(Error::config(format!(
                        "{} must come before query_expansion",
                        step.name()
                    )));
                }
                if step == Step::Aggregate {
                    aggregate = true;
                } else {
                    ensemble = true;
                }
                query = inputs.query.materialize(aggregate, ensemble)?;
                gallery = inputs.gallery.materialize(aggregate, ensemble)?;
            }
            Step::QueryExpansion => {
                let clusters = dbscan(&query, &cfg.dbscan)?;
                query = query_expansion(&query, &clusters, cfg.qe_inclusive)?;
                expanded = true;
            }
            Step::CameraVerification | Step::TemporalFilter => {
                let (filtered, st) = if step == Step::CameraVerification {
                    camera_verification(&current, &inputs.query.cams(), &inputs.gallery.cams())?
                } else {
                    temporal_filter(
                        &current,
                        &inputs.query.timestamps(),
                        &inputs.gallery.timestamps(),
                        &cfg.temporal,
                    )?
                };
                for (q, (before, after)) in current.queries.iter().zip(&filtered.queries).enumerate() {
                    let mut survivors = vec![false; ng];
                    after.indices.iter().for_each(|&g| survivors[g] = true);
                    for &g in &before.indices {
                        if !survivors[g] {
                            keep[q][g] = false;
                        }
                    }
                }
                stats = Some(st);
            }
            Step::Rerank => rerank = true,
        }
        applied.push(step.name().to_string());
        current = rank(&query, &gallery, rerank, &keep)?;
        current.steps = applied.clone();
        reports.push(report(step.name(), &current, stats)?);
    }
    current.steps = applied;
    Ok(PipelineOutput {
        ranking: current,
        reports,
    })
}
