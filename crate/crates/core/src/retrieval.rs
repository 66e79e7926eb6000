//! Embedding stores and cosine ranking.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SampleRecord, SourceId};
use crate::error::{Error, Result};
use crate::io::{self, RawEmbeddings};

/// Row metadata stored next to an embedding file (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub image_id: String,
    pub source_id: SourceId,
    /// Identity label (global class id); used only for evaluation.
    pub class: u32,
    pub camera_id: Option<i64>,
    pub timestamp: Option<i64>,
}

impl From<&SampleRecord> for EmbeddingMeta {
    fn from(r: &SampleRecord) -> Self {
        EmbeddingMeta {
            image_id: r.image_id.clone(),
            source_id: r.source_id,
            class: r.global_class,
            camera_id: r.camera_id,
            timestamp: r.timestamp,
        }
    }
}

/// Row-major `f32` embeddings with aligned metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    data: Array2<f32>,
    meta: Vec<EmbeddingMeta>,
    normalized: bool,
}

fn norm_f64(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl EmbeddingStore {
    pub fn new(data: Array2<f32>, meta: Vec<EmbeddingMeta>) -> Result<Self> {
        if data.nrows() != meta.len() {
            return Err(Error::Dimension {
                expected: data.nrows(),
                got: meta.len(),
                context: "metadata rows vs embedding rows",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite embedding values"));
        }
        Ok(EmbeddingStore {
            data: data.as_standard_layout().into_owned(),
            meta,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], meta: Vec<EmbeddingMeta>) -> Result<Self> {
        let dim = crate::dataset::check_uniform_dim(rows.iter().map(Vec::len))?.unwrap_or(0);
        let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(Array2::from_shape_vec((rows.len(), dim), flat).unwrap(), meta)
    }

    /// L2-normalize every row (norms accumulated in `f64`).
    pub fn normalized(mut self) -> Result<Self> {
        for (i, mut row) in self.data.rows_mut().into_iter().enumerate() {
            let n = norm_f64(row.iter().map(|&v| v as f64));
            if n == 0.0 {
                return Err(Error::numeric(format!(
                    "row {i} ({}) has zero norm",
                    self.meta[i].image_id
                )));
            }
            row.mapv_inplace(|v| (v as f64 / n) as f32);
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn meta(&self) -> &[EmbeddingMeta] {
        &self.meta
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i).to_slice().expect("standard layout")
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let data = self.data.select(ndarray::Axis(0), rows);
        let meta = rows.iter().map(|&i| self.meta[i].clone()).collect();
        EmbeddingStore {
            data,
            meta,
            normalized: self.normalized,
        }
    }

    /// Overwrite row `i` with the L2-normalized `v`.
    pub(crate) fn set_row_normalized(&mut self, i: usize, v: &[f64]) -> Result<()> {
        let unit = l2_normalize(v)?;
        for (d, u) in self.data.row_mut(i).iter_mut().zip(unit) {
            *d = u as f32;
        }
        Ok(())
    }

    pub fn to_raw(&self) -> RawEmbeddings {
        RawEmbeddings {
            count: self.len(),
            dim: self.dim(),
            normalized: self.normalized,
            data: self.data.iter().copied().collect(),
        }
    }

    /// Write the embedding file and its metadata sidecar.
    pub fn save(&self, emb_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<()> {
        io::save_embeddings(emb_path, &self.to_raw())?;
        let mut w = BufWriter::new(File::create(meta_path)?);
        for m in &self.meta {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load an embedding file and sidecar; rows are normalized if the file
    /// is not already flagged as normalized.
    pub fn load(emb_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<Self> {
        let raw = io::load_embeddings(emb_path)?;
        let meta = read_meta(meta_path)?;
        let flagged = raw.normalized;
        let data = Array2::from_shape_vec((raw.count, raw.dim), raw.data)
            .map_err(|e| Error::Format(e.to_string()))?;
        let store = Self::new(data, meta)?;
        if flagged {
            Ok(EmbeddingStore {
                normalized: true,
                ..store
            })
        } else {
            store.normalized()
        }
    }
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<Vec<EmbeddingMeta>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Unit vector in the direction of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("cannot normalize a non-finite vector"));
    }
    let n = norm_f64(v.iter().copied());
    if n == 0.0 {
        return Err(Error::numeric("cannot normalize a zero vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
            context: "cosine similarity operands",
        });
    }
    let na = norm_f64(a.iter().copied());
    let nb = norm_f64(b.iter().copied());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-query ranked gallery indices with descending scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl QueryRanking {
    /// Sort by descending score, ties by ascending gallery index.
    pub fn from_scores(scores: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut pairs: Vec<(usize, f64)> = scores.into_iter().collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (indices, scores) = pairs.into_iter().unzip();
        QueryRanking { indices, scores }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keep entries satisfying `keep(gallery_index)`, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let (indices, scores) = self
            .indices
            .iter()
            .zip(&self.scores)
            .filter(|(&i, _)| keep(i))
            .map(|(&i, &s)| (i, s))
            .unzip();
        self.indices = indices;
        self.scores = scores;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    /// Post-processing steps applied, in order.
    pub steps: Vec<String>,
}

/// One line of a ranking JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLine {
    pub query: usize,
    pub query_id: Option<String>,
    pub gallery: Vec<usize>,
    pub scores: Vec<f64>,
    pub steps: Vec<String>,
}

impl RankingResult {
    pub fn write_jsonl(&self, path: impl AsRef<Path>, query_ids: Option<&[EmbeddingMeta]>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (q, r) in self.queries.iter().enumerate() {
            let line = RankingLine {
                query: q,
                query_id: query_ids.map(|m| m[q].image_id.clone()),
                gallery: r.indices.clone(),
                scores: r.scores.clone(),
                steps: self.steps.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut queries = Vec::new();
        let mut steps = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: RankingLine = serde_json::from_str(&line)?;
            if l.query != queries.len() {
                return Err(Error::data(format!(
                    "ranking lines out of order: expected query {}, got {}",
                    queries.len(),
                    l.query
                )));
            }
            steps = l.steps;
            queries.push(QueryRanking {
                indices: l.gallery,
                scores: l.scores,
            });
        }
        Ok(RankingResult { queries, steps })
    }
}

/// Cosine similarity matrix (`queries x gallery`) accumulated in `f64`.
pub fn similarity_matrix(query: &EmbeddingStore, gallery: &EmbeddingStore) -> Result<Array2<f64>> {
    if query.dim() != gallery.dim() {
        return Err(Error::Dimension {
            expected: gallery.dim(),
            got: query.dim(),
            context: "query vs gallery embedding dimension",
        });
    }
    let inv_norms = |s: &EmbeddingStore| -> Result<Vec<f64>> {
        (0..s.len())
            .map(|i| {
                let n = norm_f64(s.row(i).iter().map(|&v| v as f64));
                if n == 0.0 {
                    Err(Error::numeric(format!("zero embedding for {}", s.meta[i].image_id)))
                } else {
                    Ok(1.0 / n)
                }
            })
            .collect()
    };
    let qn = inv_norms(query)?;
    let gn = inv_norms(gallery)?;
    let rows: Vec<Vec<f64>> = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            (0..gallery.len())
                .map(|j| {
                    let dot: f64 = q
                        .iter()
                        .zip(gallery.row(j))
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    (dot * qn[i] * gn[j]).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((query.len(), gallery.len()), flat).unwrap())
}

/// Rank a score matrix row by row.
pub fn rank_scores(scores: &Array2<f64>) -> RankingResult {
    let queries = (0..scores.nrows())
        .into_par_iter()
        .map(|i| QueryRanking::from_scores(scores.row(i).iter().copied().enumerate()))
        .collect();
    RankingResult {
        queries,
        steps: vec![],
    }
}

/// Full descending cosine ranking of the gallery for every query.
pub fn rank_gallery(query: &EmbeddingStore, gallery: &EmbeddingStore) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    Ok(rank_scores(&similarity_matrix(query, gallery)?))
}

/// Mean of several views of one sample, L2-normalized.
pub fn aggregate_views(views: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = views.first() else {
        return Err(Error::data("no views to aggregate"));
    };
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for v in views {
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.len(),
                context: "view dimension",
            });
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = views.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    l2_normalize(&mean).map_err(|_| Error::numeric("mean of views is the zero vector"))
}

/// Concatenate per-model embeddings after normalizing each block.
pub fn ensemble_concat(parts: &[Vec<f64>]) -> Result<Vec<f64>> {
    if parts.is_empty() {
        return Err(Error::data("no model embeddings to concatenate"));
    }
    let mut out = Vec::with_capacity(parts.iter().map(Vec::len).sum());
    for (m, p) in parts.iter().enumerate() {
        let unit = l2_normalize(p).map_err(|e| Error::numeric(format!("model {m}: {e}")))?;
        out.extend(unit);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn meta(n: usize) -> Vec<EmbeddingMeta> {
        (0..n)
            .map(|i| EmbeddingMeta {
                image_id: format!("img{i}"),
                source_id: 1,
                class: i as u32,
                camera_id: None,
                timestamp: None,
            })
            .collect()
    }

    fn store(rows: &[Vec<f64>]) -> EmbeddingStore {
        EmbeddingStore::from_rows(rows, meta(rows.len())).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
        let u = l2_normalize(&v).unwrap();
        assert_abs_diff_eq!(u[0], v[0], epsilon = 1e-15);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn rank_self_before_negation() {
        let q = store(&[vec![0.3, -0.7, 0.2]]);
        let g = store(&[vec![-0.3, 0.7, -0.2], vec![0.3, -0.7, 0.2]]);
        let r = rank_gallery(&q, &g).unwrap();
        assert_eq!(r.queries[0].indices, vec![1, 0]);
        assert!(r.queries[0].scores[0] > 0.999);
    }

    #[test]
    fn ties_break_by_index() {
        let q = store(&[vec![1.0, 0.5]]);
        let g = store(&vec![vec![0.2, 0.9]; 5]);
        let r = rank_gallery(&q, &g).unwrap();
        assert_eq!(r.queries[0].indices, vec![0, 1, 2, 3, 4]);
        assert!(rank_gallery(&q, &store(&[])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_views(&[vec![3.0, 4.0]]).unwrap(), l2_normalize(&[3.0, 4.0]).unwrap());
        let v = vec![1.0, -2.0, 2.0];
        assert_eq!(aggregate_views(&[v.clone(), v.clone()]).unwrap(), l2_normalize(&v).unwrap());
        let m = aggregate_views(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(m[0], 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(aggregate_views(&[]).is_err());
        assert!(aggregate_views(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_concat(&[vec![0.0, 2.0]]).unwrap(), vec![0.0, 1.0]);
        let e = ensemble_concat(&[vec![3.0, 4.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(e.len(), 4);
        assert_abs_diff_eq!(norm_f64(e.iter().copied()), 2f64.sqrt(), epsilon = 1e-12);
        let again = ensemble_concat(&[vec![6.0, 8.0], vec![2.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(cosine_similarity(&e, &again).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ensemble_concat(&[vec![1.0], vec![0.0]]).is_err());
    }

    #[test]
    fn store_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(&[vec![3.0, 4.0], vec![0.0, -2.0]]);
        s.save(dir.path().join("a.emb"), dir.path().join("a.jsonl")).unwrap();
        let loaded = EmbeddingStore::load(dir.path().join("a.emb"), dir.path().join("a.jsonl")).unwrap();
        assert!(loaded.is_normalized());
        assert_eq!(loaded.row(0), &[0.6, 0.8]);
        assert_eq!(loaded.meta(), s.meta());
    }

    fn brute_force_order(q: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..gallery.len()).collect();
        let sims: Vec<f64> = gallery
            .iter()
            .map(|g| {
                let d: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
                d / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * g.iter().map(|a| a * a).sum::<f64>().sqrt())
            })
            .collect();
        // insertion sort: descending similarity, ascending index
        for i in 1..idx.len() {
            let mut j = i;
            while j > 0 && (sims[idx[j]] > sims[idx[j - 1]]) {
                idx.swap(j, j - 1);
                j -= 1;
            }
        }
        idx
    }

    fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
            n,
        )
    }

    proptest! {
        #[test]
        fn matches_brute_force_sort(q in vecs(5, 8), g in vecs(5, 8)) {
            let qs = store(&q);
            let gs = store(&g);
            let r = rank_gallery(&qs, &gs).unwrap();
            // compare against f32-rounded inputs, the precision the store keeps
            let g32: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|&x| x as f32 as f64).collect()).collect();
            for (i, qr) in r.queries.iter().enumerate() {
                let q32: Vec<f64> = q[i].iter().map(|&x| x as f32 as f64).collect();
                prop_assert_eq!(&qr.indices, &brute_force_order(&q32, &g32));
                prop_assert!(qr.scores.windows(2).all(|w| w[0] >= w[1]));
            }
            // ranking k queries equals k single-query rankings
            for i in 0..q.len() {
                let single = rank_gallery(&store(&q[i..=i]), &gs).unwrap();
                prop_assert_eq!(&single.queries[0], &r.queries[i]);
            }
        }

        #[test]
        fn ranking_is_scale_invariant(q in vecs(3, 6), g in vecs(6, 6), which in 0usize..6, scale in 0.1f64..10.0) {
            let base = rank_gallery(&store(&q), &store(&g)).unwrap();
            let mut g2 = g.clone();
            // powers of two scale f32 storage exactly
            let s = 2f64.powi(scale.log2().round() as i32);
            g2[which].iter_mut().for_each(|x| *x *= s);
            let scaled = rank_gallery(&store(&q), &store(&g2)).unwrap();
            for (a, b) in base.queries.iter().zip(&scaled.queries) {
                prop_assert_eq!(&a.indices, &b.indices);
            }
        }

        #[test]
        fn ensemble_cosine_is_mean_of_part_cosines(a in vecs(3, 4), b in vecs(3, 4)) {
            let ea = ensemble_concat(&a).unwrap();
            let eb = ensemble_concat(&b).unwrap();
            let mean: f64 = a.iter().zip(&b).map(|(x, y)| cosine_similarity(x, y).unwrap()).sum::<f64>() / 3.0;
            prop_assert!((cosine_similarity(&ea, &eb).unwrap() - mean).abs() < 1e-12);
            prop_assert!((norm_f64(ea.iter().copied()) - 3f64.sqrt()).abs() < 1e-12);
        }
    }
}
