//! Retrieval metrics: average precision, mAP and Rank@K.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{EmbeddingMeta, RankingResult};

/// Ground truth for one query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelevanceJudgment {
    pub relevant: HashSet<usize>,
    /// Gallery entries removed before scoring.
    pub junk: HashSet<usize>,
}

impl RelevanceJudgment {
    pub fn new(relevant: HashSet<usize>, junk: HashSet<usize>) -> Result<Self> {
        if !relevant.is_disjoint(&junk) {
            return Err(Error::data("relevant and junk sets overlap"));
        }
        Ok(RelevanceJudgment { relevant, junk })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Same identity is relevant; only the query image itself is junk.
    #[default]
    Plain,
    /// Additionally, same identity seen by the same camera is junk.
    CrossCamera,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Protocol::Plain),
            "cross-camera" => Ok(Protocol::CrossCamera),
            other => Err(Error::config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Judgments from identity labels. A gallery entry with the query's own
/// `image_id` is always junk.
pub fn judgments_from_meta(
    query: &[EmbeddingMeta],
    gallery: &[EmbeddingMeta],
    protocol: Protocol,
) -> Vec<RelevanceJudgment> {
    query
        .iter()
        .map(|q| {
            let mut j = RelevanceJudgment::default();
            for (i, g) in gallery.iter().enumerate() {
                let same_image = g.image_id == q.image_id && g.source_id == q.source_id;
                let same_id = g.class == q.class;
                let same_cam = q.camera_id.is_some() && g.camera_id == q.camera_id;
                if same_image || (protocol == Protocol::CrossCamera && same_id && same_cam) {
                    j.junk.insert(i);
                } else if same_id {
                    j.relevant.insert(i);
                }
            }
            j
        })
        .collect()
}

fn check_unique(ranking: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ranking.len());
    for &i in ranking {
        if !seen.insert(i) {
            return Err(Error::data(format!("gallery index {i} appears twice in a ranking")));
        }
    }
    Ok(())
}

fn scored_list<'a>(
    ranking: &'a [usize],
    judgment: &'a RelevanceJudgment,
    truncate: Option<usize>,
) -> impl Iterator<Item = bool> + 'a {
    ranking
        .iter()
        .filter(|i| !judgment.junk.contains(i))
        .take(truncate.unwrap_or(usize::MAX))
        .map(|i| judgment.relevant.contains(i))
}

/// Average precision of one ranked list; `None` when the query has no
/// relevant items and must be skipped.
///
/// `AP = (1/R) * sum over relevant hits at rank r of (hits so far / r)`, with
/// junk removed before ranks are counted. Relevant items missing from the
/// list (filtered out upstream) contribute nothing.
pub fn average_precision(
    ranking: &[usize],
    judgment: &RelevanceJudgment,
    truncate: Option<usize>,
) -> Result<Option<f64>> {
    check_unique(ranking)?;
    let total_relevant = judgment.relevant.len();
    if total_relevant == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, is_rel) in scored_list(ranking, judgment, truncate).enumerate() {
        if is_rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(Some(sum / total_relevant as f64))
}

/// Whether a relevant item appears in the top `k`; `None` for skipped queries.
pub fn rank_at_k(ranking: &[usize], judgment: &RelevanceJudgment, k: usize) -> Result<Option<bool>> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    check_unique(ranking)?;
    if judgment.relevant.is_empty() {
        return Ok(None);
    }
    Ok(Some(scored_list(ranking, judgment, None).take(k).any(|r| r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub protocol: Protocol,
    /// Score only the top-N list entries (after junk removal).
    pub truncate: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            protocol: Protocol::Plain,
            truncate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// Rank@K keyed by K.
    pub rank_at: BTreeMap<usize, f64>,
    /// Per-query AP; `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_queries: usize,
    pub skipped: usize,
    /// Scored queries whose candidate list was empty (AP = 0).
    pub empty_candidates: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.rank_at.get(&1).copied().unwrap_or(f64::NAN)
    }

    pub fn write_per_query_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query", "ap", "skipped"])?;
        for (q, ap) in self.per_query_ap.iter().enumerate() {
            let ap_s = ap.map(|a| format!("{a:.10}")).unwrap_or_default();
            w.write_record([q.to_string(), ap_s, ap.is_none().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate(
    rankings: &RankingResult,
    judgments: &[RelevanceJudgment],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if rankings.queries.len() != judgments.len() {
        return Err(Error::Dimension {
            expected: judgments.len(),
            got: rankings.queries.len(),
            context: "rankings vs judgments",
        });
    }
    if cfg.ks.contains(&0) {
        return Err(Error::config("K must be at least 1"));
    }
    let max_k = cfg.ks.iter().copied().max().unwrap_or(0);
    let rows: Vec<(Option<f64>, Option<usize>, bool)> = rankings
        .queries
        .par_iter()
        .zip(judgments)
        .map(|(r, j)| {
            let ap = average_precision(&r.indices, j, cfg.truncate)?;
            let first_hit = scored_list(&r.indices, j, None)
                .take(max_k)
                .position(|x| x);
            Ok((ap, first_hit, r.indices.is_empty()))
        })
        .collect::<Result<_>>()?;

    let scored: Vec<_> = rows.iter().filter(|r| r.0.is_some()).collect();
    let n = scored.len();
    let map = if n == 0 {
        0.0
    } else {
        scored.iter().map(|r| r.0.unwrap()).sum::<f64>() / n as f64
    };
    let rank_at = cfg
        .ks
        .iter()
        .map(|&k| {
            let hits = scored
                .iter()
                .filter(|r| r.1.is_some_and(|p| p < k))
                .count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(EvalReport {
        map,
        rank_at,
        per_query_ap: rows.iter().map(|r| r.0).collect(),
        num_queries: rows.len(),
        skipped: rows.len() - n,
        empty_candidates: scored.iter().filter(|r| r.2).count(),
    })
}
