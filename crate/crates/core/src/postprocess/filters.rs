use serde::{Deserialize, Serialize};

use super::dbscan::ClusterAssignment;
use crate::error::{Error, Result};
use crate::retrieval::{EmbeddingStore, RankingResult};

/// Counters for records a filter could not judge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    /// Queries left unfiltered because their own label is missing.
    pub skipped_queries: usize,
    /// Candidate entries kept because their label is missing.
    pub unlabeled_candidates: usize,
    /// Candidate entries removed.
    pub removed: usize,
    /// Queries whose candidate list became empty.
    pub emptied_queries: usize,
}

impl FilterStats {
    pub fn merge(&mut self, other: &FilterStats) {
        self.skipped_queries += other.skipped_queries;
        self.unlabeled_candidates += other.unlabeled_candidates;
        self.removed += other.removed;
        self.emptied_queries += other.emptied_queries;
    }
}

/// Replace each clustered query by the normalized mean of the original
/// features of the other members of its cluster. With `inclusive` the query
/// itself takes part in the mean. Noise and singleton queries are unchanged.
pub fn query_expansion(
    query: &EmbeddingStore,
    clusters: &ClusterAssignment,
    inclusive: bool,
) -> Result<EmbeddingStore> {
    if clusters.labels.len() != query.len() {
        return Err(Error::Dimension {
            expected: query.len(),
            got: clusters.labels.len(),
            context: "cluster labels vs queries",
        });
    }
    if !query.is_normalized() {
        return Err(Error::config("query expansion expects a normalized store"));
    }
    let mut out = query.clone();
    for members in clusters.members() {
        if members.len() < 2 {
            continue;
        }
        let rows: Vec<Vec<f64>> = members.iter().map(|&i| query.row_f64(i)).collect();
        let total: Vec<f64> = (0..query.dim())
            .map(|d| rows.iter().map(|r| r[d]).sum())
            .collect();
        for (k, &i) in members.iter().enumerate() {
            let mean: Vec<f64> = if inclusive {
                total.clone()
            } else {
                total.iter().zip(&rows[k]).map(|(t, x)| t - x).collect()
            };
            out.set_row_normalized(i, &mean).map_err(|_| {
                Error::numeric(format!("expanded query {i} collapsed to the zero vector"))
            })?;
        }
    }
    Ok(out)
}

fn check_lengths(ranking: &RankingResult, q: usize, g: usize, what: &'static str) -> Result<()> {
    if ranking.queries.len() != q {
        return Err(Error::Dimension {
            expected: ranking.queries.len(),
            got: q,
            context: what,
        });
    }
    if let Some(bad) = ranking.queries.iter().flat_map(|r| &r.indices).find(|&&i| i >= g) {
        return Err(Error::data(format!("gallery index {bad} out of range for {g} labels")));
    }
    Ok(())
}

/// Shared body of the label-based filters: `keep(query_label, gallery_label)`.
fn filter_by_label(
    ranking: &RankingResult,
    query_labels: &[Option<i64>],
    gallery_labels: &[Option<i64>],
    step: &str,
    keep: impl Fn(i64, i64) -> bool,
) -> (RankingResult, FilterStats) {
    let mut stats = FilterStats::default();
    let mut out = ranking.clone();
    for (q, r) in out.queries.iter_mut().enumerate() {
        let Some(ql) = query_labels[q] else {
            stats.skipped_queries += 1;
            continue;
        };
        let before = r.len();
        r.retain(|g| match gallery_labels[g] {
            Some(gl) => keep(ql, gl),
            None => {
                stats.unlabeled_candidates += 1;
                true
            }
        });
        stats.removed += before - r.len();
        if r.is_empty() && before > 0 {
            stats.emptied_queries += 1;
        }
    }
    out.steps.push(step.to_string());
    (out, stats)
}

/// Drop candidates sharing the query's camera cluster. Survivors keep their
/// relative order.
pub fn camera_verification(
    ranking: &RankingResult,
    query_cams: &[Option<i64>],
    gallery_cams: &[Option<i64>],
) -> Result<(RankingResult, FilterStats)> {
    check_lengths(ranking, query_cams.len(), gallery_cams.len(), "query camera labels")?;
    Ok(filter_by_label(ranking, query_cams, gallery_cams, "camera_verification", |q, g| q != g))
}

/// Maximum time offset (seconds) between query and candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFilterConfig {
    /// Half-width of the inclusive window; [`TemporalFilterConfig::UNBOUNDED`]
    /// disables the filter.
    pub tau: i64,
}

impl TemporalFilterConfig {
    pub const UNBOUNDED: i64 = i64::MAX;

    pub fn unbounded() -> Self {
        TemporalFilterConfig { tau: Self::UNBOUNDED }
    }

    pub fn is_unbounded(&self) -> bool {
        self.tau == Self::UNBOUNDED
    }
}

impl Default for TemporalFilterConfig {
    fn default() -> Self {
        Self::unbounded()
    }
}

/// Keep candidates whose timestamp lies in `[t - tau, t + tau]`.
pub fn temporal_filter(
    ranking: &RankingResult,
    query_ts: &[Option<i64>],
    gallery_ts: &[Option<i64>],
    cfg: &TemporalFilterConfig,
) -> Result<(RankingResult, FilterStats)> {
    if cfg.tau < 0 {
        return Err(Error::config(format!("tau must be >= 0, got {}", cfg.tau)));
    }
    check_lengths(ranking, query_ts.len(), gallery_ts.len(), "query timestamps")?;
    if cfg.is_unbounded() {
        let mut out = ranking.clone();
        out.steps.push("temporal_filter".into());
        return Ok((out, FilterStats::default()));
    }
    let tau = cfg.tau as i128;
    Ok(filter_by_label(ranking, query_ts, gallery_ts, "temporal_filter", |t, g| {
        (g as i128 - t as i128).abs() <= tau
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::NOISE;
    use crate::retrieval::{EmbeddingMeta, QueryRanking};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn store(rows: &[Vec<f64>]) -> EmbeddingStore {
        let meta = (0..rows.len())
            .map(|i| EmbeddingMeta {
                image_id: i.to_string(),
                source_id: 1,
                class: 0,
                camera_id: None,
                timestamp: None,
            })
            .collect();
        EmbeddingStore::from_rows(rows, meta).unwrap().normalized().unwrap()
    }

    fn one_query(order: Vec<usize>) -> RankingResult {
        let n = order.len();
        RankingResult {
            queries: vec![QueryRanking {
                indices: order,
                scores: (0..n).map(|k| -(k as f64)).collect(),
            }],
            steps: vec![],
        }
    }

    #[test]
    fn qe_singleton_unchanged() {
        let s = store(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = ClusterAssignment { labels: vec![0, 1] };
        assert_eq!(query_expansion(&s, &c, false).unwrap(), s);
        let c = ClusterAssignment { labels: vec![NOISE, NOISE] };
        assert_eq!(query_expansion(&s, &c, false).unwrap(), s);
    }

    #[test]
    fn qe_pair_swaps() {
        let s = store(&[vec![1.0, 0.2], vec![0.1, 1.0]]);
        let c = ClusterAssignment { labels: vec![0, 0] };
        let e = query_expansion(&s, &c, false).unwrap();
        assert_eq!(e.row(0), s.row(1));
        assert_eq!(e.row(1), s.row(0));
    }

    #[test]
    fn qe_three_orthogonal() {
        let s = store(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let c = ClusterAssignment { labels: vec![0, 0, 0] };
        let e = query_expansion(&s, &c, false).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [[0.0, h, h], [h, 0.0, h], [h, h, 0.0]];
        for (i, row) in expect.iter().enumerate() {
            for (a, b) in e.row(i).iter().zip(row) {
                assert_abs_diff_eq!(*a as f64, *b, epsilon = 1e-7);
            }
        }
        let inc = query_expansion(&s, &c, true).unwrap();
        let t = 1.0 / 3f64.sqrt();
        assert!(inc.row(1).iter().all(|&v| (v as f64 - t).abs() < 1e-7));
    }

    #[test]
    fn qe_length_mismatch() {
        let s = store(&[vec![1.0, 0.0]]);
        assert!(query_expansion(&s, &ClusterAssignment { labels: vec![0, 0] }, false).is_err());
    }

    #[test]
    fn camver_examples() {
        let r = one_query(vec![0, 1, 2, 3]);
        let (out, st) = camera_verification(&r, &[Some(1)], &[Some(1), Some(2), Some(1), Some(3)]).unwrap();
        assert_eq!(out.queries[0].indices, vec![1, 3]);
        assert_eq!(out.queries[0].scores, vec![-1.0, -3.0]);
        assert_eq!(st.removed, 2);
        assert_eq!(out.steps, vec!["camera_verification"]);

        let (out, st) = camera_verification(&r, &[Some(1)], &[Some(1); 4]).unwrap();
        assert!(out.queries[0].is_empty());
        assert_eq!(st.emptied_queries, 1);

        let (out, _) = camera_verification(&r, &[Some(9)], &[Some(1), Some(2), Some(1), Some(3)]).unwrap();
        assert_eq!(out.queries, r.queries);
    }

    #[test]
    fn camver_missing_labels_counted() {
        let r = one_query(vec![0, 1]);
        let (out, st) = camera_verification(&r, &[None], &[Some(1), Some(1)]).unwrap();
        assert_eq!(out.queries, r.queries);
        assert_eq!(st.skipped_queries, 1);
        let (out, st) = camera_verification(&r, &[Some(1)], &[None, Some(1)]).unwrap();
        assert_eq!(out.queries[0].indices, vec![0]);
        assert_eq!(st.unlabeled_candidates, 1);
        assert!(camera_verification(&r, &[Some(1)], &[Some(1)]).is_err());
    }

    #[test]
    fn temporal_examples() {
        let r = one_query(vec![0, 1, 2, 3]);
        let ts = [Some(85), Some(95), Some(100), Some(111)];
        let (out, _) = temporal_filter(&r, &[Some(100)], &ts, &TemporalFilterConfig { tau: 10 }).unwrap();
        assert_eq!(out.queries[0].indices, vec![1, 2]);
        let (out, _) = temporal_filter(&r, &[Some(100)], &ts, &TemporalFilterConfig { tau: 0 }).unwrap();
        assert_eq!(out.queries[0].indices, vec![2]);
        let (out, _) = temporal_filter(&r, &[Some(100)], &ts, &TemporalFilterConfig::unbounded()).unwrap();
        assert_eq!(out.queries, r.queries);
        assert!(temporal_filter(&r, &[Some(100)], &ts, &TemporalFilterConfig { tau: -1 }).is_err());
    }

    #[test]
    fn temporal_extreme_timestamps_do_not_overflow() {
        let r = one_query(vec![0, 1]);
        let (out, _) = temporal_filter(
            &r,
            &[Some(i64::MIN)],
            &[Some(i64::MAX), Some(i64::MIN)],
            &TemporalFilterConfig { tau: 5 },
        )
        .unwrap();
        assert_eq!(out.queries[0].indices, vec![1]);
    }

    fn labels(n: usize) -> impl Strategy<Value = Vec<Option<i64>>> {
        proptest::collection::vec(proptest::option::weighted(0.85, 0i64..6), n)
    }

    fn instance() -> impl Strategy<Value = (RankingResult, Vec<Option<i64>>, Vec<Option<i64>>, Vec<Option<i64>>, Vec<Option<i64>>, i64)> {
        (1usize..6, 1usize..25).prop_flat_map(|(nq, ng)| {
            let perms = proptest::collection::vec(Just((0..ng).collect::<Vec<_>>()).prop_shuffle(), nq);
            (perms, labels(nq), labels(ng), labels(nq), labels(ng), 0i64..4).prop_map(
                |(perms, qc, gc, qt, gt, tau)| {
                    let queries = perms
                        .into_iter()
                        .map(|p| {
                            let n = p.len();
                            QueryRanking {
                                indices: p,
                                scores: (0..n).map(|k| -(k as f64)).collect(),
                            }
                        })
                        .collect();
                    (RankingResult { queries, steps: vec![] }, qc, gc, qt, gt, tau)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn filters_idempotent_and_commute((r, qc, gc, qt, gt, tau) in instance()) {
            let cfg = TemporalFilterConfig { tau };
            let (c1, _) = camera_verification(&r, &qc, &gc).unwrap();
            let (c2, st) = camera_verification(&c1, &qc, &gc).unwrap();
            prop_assert_eq!(&c1.queries, &c2.queries);
            prop_assert_eq!(st.removed, 0);
            let (t1, _) = temporal_filter(&r, &qt, &gt, &cfg).unwrap();
            let (t2, _) = temporal_filter(&t1, &qt, &gt, &cfg).unwrap();
            prop_assert_eq!(&t1.queries, &t2.queries);
            let (ct, _) = temporal_filter(&c1, &qt, &gt, &cfg).unwrap();
            let (tc, _) = camera_verification(&t1, &qc, &gc).unwrap();
            prop_assert_eq!(&ct.queries, &tc.queries);
            for (a, b) in ct.queries.iter().zip(&r.queries) {
                prop_assert!(a.len() <= b.len());
            }
        }

        #[test]
        fn qe_preserves_count_and_unit_norm(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 2..12),
            labels in proptest::collection::vec(-1i64..3, 12),
            inclusive: bool,
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let s = store(&rows);
            // relabel to contiguous ids
            let mut map = std::collections::BTreeMap::new();
            let raw: Vec<i64> = labels[..rows.len()].to_vec();
            let labels: Vec<i64> = raw.iter().map(|&l| if l < 0 { NOISE } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }).collect();
            let c = ClusterAssignment { labels };
            match query_expansion(&s, &c, inclusive) {
                Ok(e) => {
                    prop_assert_eq!(e.len(), s.len());
                    for i in 0..e.len() {
                        let n: f64 = e.row_f64(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                        prop_assert!((n - 1.0).abs() < 1e-6);
                    }
                }
                Err(Error::Numeric(_)) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
