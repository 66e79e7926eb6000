use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{similarity_matrix, EmbeddingStore};

/// Cluster id of points that belong to no cluster.
pub const NOISE: i64 = -1;

/// DBSCAN over cosine distance `1 - cos`. A point is a core point when at
/// least `min_pts` points (itself included) lie within `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 0.5, min_pts: 2 }
    }
}

impl DbscanConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(Error::config("dbscan needs eps > 0 and min_pts >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per sample, contiguous from 0; [`NOISE`] for noise.
    pub labels: Vec<i64>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Members of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

pub fn dbscan(store: &EmbeddingStore, cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    if store.is_empty() {
        return Err(Error::data("cannot cluster an empty store"));
    }
    if !store.is_normalized() {
        return Err(Error::config("dbscan expects a normalized store"));
    }
    let sim = similarity_matrix(store, store)?;
    dbscan_with_similarity(&sim, cfg)
}

/// DBSCAN from a precomputed square similarity matrix. Points are scanned in
/// ascending index order; a border point joins the first cluster that
/// reaches it.
pub fn dbscan_with_similarity(sim: &Array2<f64>, cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let n = sim.nrows();
    if n == 0 || sim.ncols() != n {
        return Err(Error::data("dbscan needs a non-empty square similarity matrix"));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| 1.0 - sim[[i, j]] <= cfg.eps).collect())
        .collect();

    const UNVISITED: i64 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i64;
    let mut queued = vec![false; n];
    for p in 0..n {
        if labels[p] != UNVISITED {
            continue;
        }
        if neighbors[p].len() < cfg.min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        let mut queue: VecDeque<usize> = VecDeque::new();
        queued.iter_mut().for_each(|q| *q = false);
        queued[p] = true;
        for &q in &neighbors[p] {
            if !queued[q] {
                queued[q] = true;
                queue.push_back(q);
            }
        }
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            if neighbors[q].len() >= cfg.min_pts {
                for &r in &neighbors[q] {
                    if !queued[r] {
                        queued[r] = true;
                        queue.push_back(r);
                    }
                }
            }
        }
        cluster += 1;
    }
    Ok(ClusterAssignment { labels })
}
