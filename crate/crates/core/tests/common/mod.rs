//! Brute-force reference implementations used to cross-check the library.
//! Everything here is deliberately naive: dense loops, no shared helpers
//! with the crate under test.

#![allow(dead_code)]

use std::collections::HashSet;

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- metrics

/// Average precision computed as the mean of precision@k over the ranks
/// of relevant hits, recounting hits from scratch at every rank.
pub fn brute_ap(ranking: &[usize], relevant: &HashSet<usize>, junk: &HashSet<usize>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let list: Vec<usize> = ranking.iter().copied().filter(|i| !junk.contains(i)).collect();
    let mut total = 0.0;
    for k in 0..list.len() {
        if relevant.contains(&list[k]) {
            let hits = list[..=k].iter().filter(|i| relevant.contains(i)).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Some(total / relevant.len() as f64)
}

pub fn brute_hit_at(ranking: &[usize], relevant: &HashSet<usize>, junk: &HashSet<usize>, k: usize) -> Option<bool> {
    if relevant.is_empty() {
        return None;
    }
    let list: Vec<usize> = ranking.iter().copied().filter(|i| !junk.contains(i)).collect();
    Some(list.iter().take(k).any(|i| relevant.contains(i)))
}

// ---------------------------------------------------------------- head loss

/// Plain-vector copy of the head's trainable tensors.
#[derive(Clone)]
pub struct DenseHead {
    pub d_in: usize,
    pub embed: usize,
    pub classes: usize,
    /// row-major `d_in x embed`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// row-major `embed x classes`
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    pub eps: f64,
}

impl DenseHead {
    pub fn tensor_mut(&mut self, t: usize) -> &mut Vec<f64> {
        match t {
            0 => &mut self.w1,
            1 => &mut self.b1,
            2 => &mut self.gamma,
            3 => &mut self.beta,
            4 => &mut self.wc,
            _ => &mut self.bc,
        }
    }

    /// Mean cross-entropy of a train-mode (batch statistics) forward pass.
    pub fn loss(&self, x: &[Vec<f64>], labels: &[u32]) -> f64 {
        let n = x.len();
        let (d, e, c) = (self.d_in, self.embed, self.classes);
        let mut z = vec![vec![0.0; e]; n];
        for i in 0..n {
            for k in 0..e {
                let mut s = self.b1[k];
                for j in 0..d {
                    s += x[i][j] * self.w1[j * e + k];
                }
                z[i][k] = s;
            }
        }
        let mut f = vec![vec![0.0; e]; n];
        for k in 0..e {
            let mean = (0..n).map(|i| z[i][k]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (z[i][k] - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                f[i][k] = (z[i][k] - mean) / (var + self.eps).sqrt() * self.gamma[k] + self.beta[k];
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..c)
                .map(|m| self.bc[m] + (0..e).map(|k| f[i][k] * self.wc[k * c + m]).sum::<f64>())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[labels[i] as usize];
        }
        total / n as f64
    }

    /// Central finite differences of `loss` for tensor `t`.
    pub fn numeric_grad(&self, t: usize, x: &[Vec<f64>], labels: &[u32], h: f64) -> Vec<f64> {
        let mut probe = self.clone();
        let len = probe.tensor_mut(t).len();
        (0..len)
            .map(|p| {
                let orig = probe.tensor_mut(t)[p];
                probe.tensor_mut(t)[p] = orig + h;
                let up = probe.loss(x, labels);
                probe.tensor_mut(t)[p] = orig - h;
                let down = probe.loss(x, labels);
                probe.tensor_mut(t)[p] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// `||a - n|| / max(||a||, ||n||, 1e-6)`
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    diff / norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied())).max(1e-6)
}

// ---------------------------------------------------------------- clustering

/// Cosine similarity of the `f32` rows, accumulated in `f64`.
pub fn cosine_dense(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    a.iter()
        .map(|x| {
            b.iter()
                .map(|y| {
                    let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
                    (dot / norm(x) / norm(y)).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Textbook DBSCAN (depth-first expansion with a seed stack) over cosine
/// distance. Noise is -1.
pub fn dbscan_oracle(sim: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = sim.len();
    let region = |p: usize| -> Vec<usize> { (0..n).filter(|&q| 1.0 - sim[p][q] <= eps).collect() };
    let mut label: Vec<Option<i64>> = vec![None; n];
    let mut next = 0i64;
    for p in 0..n {
        if label[p].is_some() {
            continue;
        }
        let seeds = region(p);
        if seeds.len() < min_pts {
            label[p] = Some(-1);
            continue;
        }
        let c = next;
        next += 1;
        label[p] = Some(c);
        let mut stack: Vec<usize> = seeds.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = stack.pop() {
            match label[q] {
                Some(-1) => {
                    label[q] = Some(c);
                    continue;
                }
                Some(_) => continue,
                None => label[q] = Some(c),
            }
            let r = region(q);
            if r.len() >= min_pts {
                stack.extend(r);
            }
        }
    }
    label.into_iter().map(|l| l.unwrap()).collect()
}

// ---------------------------------------------------------------- re-ranking

fn argsort(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable: equal distances keep index order
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
    idx
}

fn k_reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let forward = &rank[i][..(k + 1).min(rank[i].len())];
    forward
        .iter()
        .copied()
        .filter(|&c| rank[c][..(k + 1).min(rank[c].len())].contains(&i))
        .collect()
}

/// Dense transcription of k-reciprocal re-ranking. Returns the
/// `query x gallery` final distances and the ranking per query, ordered by
/// distance, then original similarity (descending), then index.
pub fn rerank_oracle(
    q: &[Vec<f32>],
    g: &[Vec<f32>],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let nq = q.len();
    let all: Vec<Vec<f32>> = q.iter().chain(g).cloned().collect();
    let n = all.len();
    let raw = cosine_dense(&all, &all);
    let sim: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| raw[i.min(j)][i.max(j)]).collect())
        .collect();

    let mut dist: Vec<Vec<f64>> = sim
        .iter()
        .map(|r| r.iter().map(|s| (2.0 - 2.0 * s).powi(2)).collect())
        .collect();
    for row in dist.iter_mut() {
        let m = row.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            for d in row.iter_mut() {
                *d /= m;
            }
        }
    }
    let rank: Vec<Vec<usize>> = dist.iter().map(|r| argsort(r)).collect();
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;

    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let base = k_reciprocal(&rank, i, k1);
        let mut expansion = base.clone();
        for &cand in &base {
            let cr = k_reciprocal(&rank, cand, half);
            let common = cr.iter().filter(|x| base.contains(x)).count();
            if common as f64 > 2.0 / 3.0 * cr.len() as f64 {
                expansion.extend(cr);
            }
        }
        expansion.sort();
        expansion.dedup();
        let total: f64 = expansion.iter().map(|&j| (-dist[i][j]).exp()).sum();
        for &j in &expansion {
            v[i][j] = (-dist[i][j]).exp() / total;
        }
    }
    if k2 != 1 {
        let mut vqe = vec![vec![0.0; n]; n];
        for i in 0..n {
            for &r in &rank[i][..k2] {
                for j in 0..n {
                    vqe[i][j] += v[r][j];
                }
            }
            for j in 0..n {
                vqe[i][j] /= k2 as f64;
            }
        }
        v = vqe;
    }

    let mut final_dist = vec![vec![0.0; n - nq]; nq];
    for i in 0..nq {
        let mut temp_min = vec![0.0; n];
        for j in 0..n {
            if v[i][j] == 0.0 {
                continue;
            }
            for r in 0..n {
                if v[r][j] != 0.0 {
                    temp_min[r] += v[i][j].min(v[r][j]);
                }
            }
        }
        for gi in 0..n - nq {
            let t = temp_min[nq + gi];
            let jaccard = 1.0 - t / (2.0 - t);
            final_dist[i][gi] = jaccard * (1.0 - lambda) + dist[i][nq + gi] * lambda;
        }
    }
    let rankings = (0..nq)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n - nq).collect();
            idx.sort_by(|&a, &b| {
                final_dist[i][a]
                    .partial_cmp(&final_dist[i][b])
                    .unwrap()
                    .then(sim[i][nq + b].partial_cmp(&sim[i][nq + a]).unwrap())
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    (final_dist, rankings)
}
