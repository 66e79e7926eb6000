use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{rank_gallery, similarity_matrix, EmbeddingStore, QueryRanking, RankingResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the final distance.
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::config(format!(
                "re-ranking needs 1 <= k2 <= k1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Row-wise order by (distance, index) truncated to `len` entries.
fn nearest(row: &[f64], len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
    if len < idx.len() {
        idx.select_nth_unstable_by(len, cmp);
        idx.truncate(len);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Members of `top[i]` that also list `i` among their own top entries.
fn reciprocal(i: usize, top: &[Vec<usize>], sorted_top: &[Vec<usize>]) -> Vec<usize> {
    top[i]
        .iter()
        .copied()
        .filter(|&c| sorted_top[c].binary_search(&i).is_ok())
        .collect()
}

fn sorted_copy(v: &[Vec<usize>]) -> Vec<Vec<usize>> {
    v.iter()
        .map(|r| {
            let mut r = r.clone();
            r.sort_unstable();
            r
        })
        .collect()
}

/// Query-by-gallery re-ranked distances together with the original cosine
/// similarities (used to break ties).
fn distances(query: &EmbeddingStore, gallery: &EmbeddingStore, cfg: &RerankConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let nq = query.len();
    let ng = gallery.len();
    let all = EmbeddingStore::new(
        concatenate(Axis(0), &[query.data().view(), gallery.data().view()])
            .map_err(|e| Error::data(e.to_string()))?,
        query.meta().iter().chain(gallery.meta()).cloned().collect(),
    )?;
    let n = nq + ng;
    let raw = similarity_matrix(&all, &all)?;
    // Use the upper triangle for both halves so the matrix is exactly
    // symmetric and query-gallery entries match `similarity_matrix(q, g)`.
    let sim = Array2::from_shape_fn((n, n), |(i, j)| raw[[i.min(j), i.max(j)]]);

    let mut dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = sim.row(i).iter().map(|&s| (2.0 - 2.0 * s).powi(2)).collect();
            let max = row.iter().copied().fold(0.0f64, f64::max);
            if max > 0.0 {
                row.iter_mut().for_each(|d| *d /= max);
            }
            row
        })
        .collect();

    let half = ((cfg.k1 as f64) / 2.0).round_ties_even() as usize;
    let depth = (cfg.k1 + 1).max(cfg.k2).min(n);
    let order: Vec<Vec<usize>> = dist.par_iter().map(|row| nearest(row, depth)).collect();
    let top: Vec<Vec<usize>> = order.iter().map(|r| r[..(cfg.k1 + 1).min(r.len())].to_vec()).collect();
    let top_half: Vec<Vec<usize>> = order.iter().map(|r| r[..(half + 1).min(r.len())].to_vec()).collect();
    let sorted_top = sorted_copy(&top);
    let sorted_half = sorted_copy(&top_half);

    // Sparse neighbourhood encodings, columns ascending.
    let mut v: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = reciprocal(i, &top, &sorted_top);
            let mut base_sorted = base.clone();
            base_sorted.sort_unstable();
            let mut expanded = base.clone();
            for &c in &base {
                let cand = reciprocal(c, &top_half, &sorted_half);
                let overlap = cand.iter().filter(|x| base_sorted.binary_search(x).is_ok()).count();
                if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    expanded.extend(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i][j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            expanded.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();

    if cfg.k2 != 1 {
        v = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![0.0f64; n];
                let mut touched = vec![false; n];
                for &r in &order[i][..cfg.k2] {
                    for &(j, w) in &v[r] {
                        acc[j] += w;
                        touched[j] = true;
                    }
                }
                (0..n)
                    .filter(|&j| touched[j])
                    .map(|j| (j, acc[j] / cfg.k2 as f64))
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            })
            .collect();
    }

    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate() {
        for &(j, w) in row {
            if w != 0.0 {
                inverted[j].push((r, w));
            }
        }
    }

    dist.truncate(nq);
    let lambda = cfg.lambda;
    let rows: Vec<Vec<f64>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let mut temp_min = vec![0.0f64; n];
            for &(j, w) in &v[i] {
                for &(r, wr) in &inverted[j] {
                    temp_min[r] += w.min(wr);
                }
            }
            (0..ng)
                .map(|g| {
                    let t = temp_min[nq + g];
                    let jaccard = 1.0 - t / (2.0 - t);
                    jaccard * (1.0 - lambda) + dist[i][nq + g] * lambda
                })
                .collect()
        })
        .collect();
    let final_dist = Array2::from_shape_vec((nq, ng), rows.into_iter().flatten().collect()).unwrap();
    let base_sim = sim.slice(ndarray::s![..nq, nq..]).to_owned();
    Ok((final_dist, base_sim))
}

fn check_inputs(query: &EmbeddingStore, gallery: &EmbeddingStore, cfg: &RerankConfig) -> Result<()> {
    cfg.validate()?;
    if !query.is_normalized() || !gallery.is_normalized() {
        return Err(Error::config("re-ranking expects normalized stores"));
    }
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    Ok(())
}

/// Final k-reciprocal distances (`queries x gallery`):
/// `lambda * original + (1 - lambda) * jaccard`.
pub fn k_reciprocal_distances(
    query: &EmbeddingStore,
    gallery: &EmbeddingStore,
    cfg: &RerankConfig,
) -> Result<Array2<f64>> {
    check_inputs(query, gallery, cfg)?;
    if cfg.k1 >= gallery.len() {
        return Err(Error::config(format!(
            "k1={} must be smaller than the gallery size {}",
            cfg.k1,
            gallery.len()
        )));
    }
    Ok(distances(query, gallery, cfg)?.0)
}

/// Re-rank with k-reciprocal encoding. Scores are `1 - distance`; ties are
/// broken by original cosine similarity, then by gallery index. A gallery of
/// one item is returned as the base ranking.
pub fn k_reciprocal_rerank(
    query: &EmbeddingStore,
    gallery: &EmbeddingStore,
    cfg: &RerankConfig,
) -> Result<RankingResult> {
    check_inputs(query, gallery, cfg)?;
    if gallery.len() == 1 {
        let mut r = rank_gallery(query, gallery)?;
        r.steps.push("rerank".into());
        return Ok(r);
    }
    if cfg.k1 >= gallery.len() {
        return Err(Error::config(format!(
            "k1={} must be smaller than the gallery size {}",
            cfg.k1,
            gallery.len()
        )));
    }
    let (dist, sim) = distances(query, gallery, cfg)?;
    let queries = (0..dist.nrows())
        .into_par_iter()
        .map(|i| {
            let d = dist.row(i);
            let s = sim.row(i);
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&a, &b| {
                d[a].total_cmp(&d[b])
                    .then(s[b].total_cmp(&s[a]))
                    .then(a.cmp(&b))
            });
            QueryRanking {
                scores: idx.iter().map(|&j| 1.0 - d[j]).collect(),
                indices: idx,
            }
        })
        .collect();
    Ok(RankingResult {
        queries,
        steps: vec!["rerank".into()],
    })
}
