//! Python bindings: ranking, evaluation, re-ranking and clustering over
//! plain lists of feature rows.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vreid_core::eval::{evaluate as eval_rankings, judgments_from_meta, EvalConfig};
use vreid_core::postprocess::{dbscan as run_dbscan, k_reciprocal_rerank, DbscanConfig, RerankConfig};
use vreid_core::retrieval::{rank_gallery, EmbeddingMeta, EmbeddingStore, QueryRanking, RankingResult};
use vreid_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn meta(labels: Option<&[u32]>, cams: Option<&[i64]>, n: usize) -> PyResult<Vec<EmbeddingMeta>> {
    for (len, what) in [(labels.map(<[_]>::len), "labels"), (cams.map(<[_]>::len), "cameras")] {
        if len.is_some_and(|l| l != n) {
            return Err(PyValueError::new_err(format!("expected {n} {what}, got {}", len.unwrap())));
        }
    }
    Ok((0..n)
        .map(|i| EmbeddingMeta {
            image_id: i.to_string(),
            source_id: 1,
            class: labels.map_or(0, |l| l[i]),
            camera_id: cams.map(|c| c[i]),
            timestamp: None,
        })
        .collect())
}

fn store(rows: &[Vec<f64>]) -> PyResult<EmbeddingStore> {
    EmbeddingStore::from_rows(rows, meta(None, None, rows.len())?)
        .and_then(EmbeddingStore::normalized)
        .map_err(to_py)
}

fn unpack(r: RankingResult) -> Vec<(Vec<usize>, Vec<f64>)> {
    r.queries.into_iter().map(|q| (q.indices, q.scores)).collect()
}

/// Rank every gallery row for each query row by cosine similarity.
/// Returns one `(indices, scores)` pair per query.
#[pyfunction]
fn rank(query: Vec<Vec<f64>>, gallery: Vec<Vec<f64>>) -> PyResult<Vec<(Vec<usize>, Vec<f64>)>> {
    let r = rank_gallery(&store(&query)?, &store(&gallery)?).map_err(to_py)?;
    Ok(unpack(r))
}

/// k-reciprocal re-ranking; same return shape as `rank`.
#[pyfunction]
#[pyo3(signature = (query, gallery, k1=20, k2=6, lambda_=0.3))]
fn rerank(
    query: Vec<Vec<f64>>,
    gallery: Vec<Vec<f64>>,
    k1: usize,
    k2: usize,
    lambda_: f64,
) -> PyResult<Vec<(Vec<usize>, Vec<f64>)>> {
    let cfg = RerankConfig { k1, k2, lambda: lambda_ };
    let r = k_reciprocal_rerank(&store(&query)?, &store(&gallery)?, &cfg).map_err(to_py)?;
    Ok(unpack(r))
}

/// DBSCAN over cosine distance; noise is labelled -1.
#[pyfunction]
#[pyo3(signature = (points, eps=0.5, min_pts=2))]
fn dbscan(points: Vec<Vec<f64>>, eps: f64, min_pts: usize) -> PyResult<Vec<i64>> {
    let a = run_dbscan(&store(&points)?, &DbscanConfig { eps, min_pts }).map_err(to_py)?;
    Ok(a.labels)
}

/// Score rankings (lists of gallery indices) against identity labels.
/// Returns `(mAP, {k: rank@k}, per-query AP or None)`.
#[pyfunction]
#[pyo3(signature = (rankings, query_labels, gallery_labels, query_cams=None, gallery_cams=None, ks=vec![1, 5, 10], protocol="plain"))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn evaluate(
    rankings: Vec<Vec<usize>>,
    query_labels: Vec<u32>,
    gallery_labels: Vec<u32>,
    query_cams: Option<Vec<i64>>,
    gallery_cams: Option<Vec<i64>>,
    ks: Vec<usize>,
    protocol: &str,
) -> PyResult<(f64, Vec<(usize, f64)>, Vec<Option<f64>>)> {
    let qm = meta(Some(&query_labels), query_cams.as_deref(), query_labels.len())?;
    let gm = meta(Some(&gallery_labels), gallery_cams.as_deref(), gallery_labels.len())?;
    let cfg = EvalConfig {
        ks,
        protocol: protocol.parse().map_err(to_py)?,
        truncate: None,
    };
    let result = RankingResult {
        queries: rankings
            .into_iter()
            .map(|indices| QueryRanking {
                scores: vec![0.0; indices.len()],
                indices,
            })
            .collect(),
        steps: Vec::new(),
    };
    let judgments = judgments_from_meta(&qm, &gm, cfg.protocol);
    let report = eval_rankings(&result, &judgments, &cfg).map_err(to_py)?;
    Ok((report.map, report.rank_at.into_iter().collect(), report.per_query_ap))
}

/// Crate and file-format versions as `key=value` lines.
#[pyfunction]
fn version() -> String {
    vreid_core::version_info()
}

#[pymodule]
fn vreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
