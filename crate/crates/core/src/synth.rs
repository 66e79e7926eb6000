//! Seeded generator of multi-source embedding datasets.
//!
//! A sample's raw feature is
//!
//! ```text
//! identity centroid + source offset + (source, camera) offset + noise
//! ```
//!
//! L2-normalized. Identity centroids of every source live in one shared
//! low-rank subspace, which is what makes other sources informative about the
//! target. Every component has expected norm equal to its configured scale.
//!
//! Randomness is drawn from counter-addressed streams (see [`crate::rng`]):
//! each identity, camera and sample owns its stream, so output does not
//! depend on generation order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{merge_label_spaces, resolve_records, MergedLabelSpace, RawRecord, SampleRecord, SourceManifest, Split};
use crate::error::{Error, Result};
use crate::io::RawEmbeddings;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub identities: usize,
    /// Total images of the source, spread over identities by
    /// [`long_tail_counts`].
    pub images: usize,
    /// 0 gives near-uniform counts; larger values give a heavier head.
    pub tail_exponent: f64,
    pub cameras: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sources: Vec<SynthSource>,
    pub feature_dim: usize,
    /// Rank of the identity subspace shared by all sources.
    pub identity_dim: usize,
    pub identity_scale: f64,
    pub domain_scale: f64,
    pub camera_scale: f64,
    /// When non-zero, camera offsets are viewpoints shared by all sources:
    /// camera `c` of every source shows viewpoint `c % viewpoints`. Zero
    /// gives every (source, camera) its own offset.
    pub viewpoints: usize,
    pub noise_sigma: f64,
    /// Identity appearance times are uniform in `[0, time_horizon)`.
    pub time_horizon: i64,
    /// Images of an identity fall within `+- time_spread` of its appearance.
    pub time_spread: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: vec![SynthSource {
                identities: 20,
                images: 200,
                tail_exponent: 0.0,
                cameras: 4,
            }],
            feature_dim: 32,
            identity_dim: 16,
            identity_scale: 1.0,
            domain_scale: 0.5,
            camera_scale: 0.5,
            viewpoints: 0,
            noise_sigma: 0.5,
            time_horizon: 10_000,
            time_spread: 300,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("at least one source is required"));
        }
        if self.feature_dim < 2 || self.identity_dim < 1 || self.identity_dim > self.feature_dim {
            return Err(Error::config(
                "need feature_dim >= 2 and 1 <= identity_dim <= feature_dim",
            ));
        }
        let scales = [self.identity_scale, self.domain_scale, self.camera_scale, self.noise_sigma];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("scales must be finite and non-negative"));
        }
        if self.time_horizon < 1 || self.time_spread < 0 {
            return Err(Error::config("time_horizon must be >= 1 and time_spread >= 0"));
        }
        for (d, s) in self.sources.iter().enumerate() {
            if s.identities < 2 {
                return Err(Error::config(format!(
                    "source {} needs at least 2 identities",
                    d + 1
                )));
            }
            if s.images < s.identities {
                return Err(Error::config(format!(
                    "source {}: {} images cannot cover {} identities",
                    d + 1,
                    s.images,
                    s.identities
                )));
            }
            if s.cameras == 0 || !(s.tail_exponent >= 0.0) {
                return Err(Error::config(format!(
                    "source {}: cameras must be >= 1 and tail_exponent >= 0",
                    d + 1
                )));
            }
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A random direction scaled so its expected norm is `scale`.
pub(crate) fn scaled_gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let s = scale / (n as f64).sqrt();
    gaussian_vec(rng, n).into_iter().map(|v| v * s).collect()
}

/// Per-identity image counts following a power law in identity rank.
///
/// Every identity receives one image; the remaining `total - identities`
/// are apportioned proportionally to `(rank + 1)^-exponent` by largest
/// remainder. Ranks are assigned to identities by a seeded shuffle.
pub fn long_tail_counts(identities: usize, total: usize, exponent: f64, seed: u64) -> Result<Vec<usize>> {
    if identities == 0 || total < identities {
        return Err(Error::config(format!(
            "cannot spread {total} images over {identities} identities with at least one each"
        )));
    }
    let weights: Vec<f64> = (0..identities).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
    let wsum: f64 = weights.iter().sum();
    let spare = total - identities;
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * spare as f64).collect();
    let mut by_rank: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - by_rank.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..identities).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &r in &order {
        if left == 0 {
            break;
        }
        by_rank[r] += 1;
        left -= 1;
    }
    let mut ranks: Vec<usize> = (0..identities).collect();
    ranks.shuffle(&mut rng::stream(seed, purpose::SYNTH_COUNTS, 0, 0));
    Ok(ranks.into_iter().map(|r| by_rank[r] + 1).collect())
}

/// Generated manifests with row-aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifests: Vec<SourceManifest>,
    /// `features[d][i]` belongs to `manifests[d].records[i]`.
    pub features: Vec<Vec<Vec<f32>>>,
    /// Clean identity centroid (before offsets and noise) of each record.
    pub centroids: Vec<Vec<Vec<f64>>>,
}

impl SynthDataset {
    pub fn label_space(&self) -> Result<MergedLabelSpace> {
        merge_label_spaces(&self.manifests)
    }

    /// Records of the given sources (1-based ids) resolved against `space`.
    pub fn records(&self, space: &MergedLabelSpace, sources: &[u32]) -> Result<Vec<SampleRecord>> {
        let mut out = Vec::new();
        for m in &self.manifests {
            if !sources.contains(&m.source_id) {
                continue;
            }
            let d = (m.source_id - 1) as usize;
            let n = out.len();
            out.extend(resolve_records(m, space, Some(&self.features[d]), n)?);
        }
        Ok(out)
    }

    pub fn source_embeddings(&self, source_id: u32) -> RawEmbeddings {
        let rows = &self.features[(source_id - 1) as usize];
        let dim = rows.first().map_or(0, Vec::len);
        RawEmbeddings {
            count: rows.len(),
            dim,
            normalized: true,
            data: rows.iter().flatten().copied().collect(),
        }
    }
}

/// Shared identity basis: `identity_dim` Gaussian directions of unit
/// expected norm.
fn identity_basis(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(cfg.seed, purpose::SYNTH_BASIS, 0, 0);
    (0..cfg.identity_dim)
        .map(|_| scaled_gaussian(&mut rng, cfg.feature_dim, 1.0))
        .collect()
}

fn normalize32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        // unreachable in practice: a zero sum of continuous draws
        return v.iter().map(|&x| x as f32).collect();
    }
    v.iter().map(|&x| (x / n) as f32).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let basis = identity_basis(cfg);
    let mut manifests = Vec::with_capacity(cfg.sources.len());
    let mut features = Vec::with_capacity(cfg.sources.len());
    let mut centroids = Vec::with_capacity(cfg.sources.len());

    for (d, src) in cfg.sources.iter().enumerate() {
        let source_id = d as u32 + 1;
        let sid = source_id as u64;
        let domain = scaled_gaussian(&mut rng::stream(cfg.seed, purpose::SYNTH_DOMAIN, sid, 0), dim, cfg.domain_scale);
        let cameras: Vec<Vec<f64>> = (0..src.cameras)
            .map(|c| {
                // stream source 0 is reserved for the shared viewpoint pool
                let (a, b) = if cfg.viewpoints > 0 {
                    (0, (c % cfg.viewpoints) as u64)
                } else {
                    (sid, c as u64)
                };
                scaled_gaussian(
                    &mut rng::stream(cfg.seed, purpose::SYNTH_CAMERA, a, b),
                    dim,
                    cfg.camera_scale,
                )
            })
            .collect();
        let counts = long_tail_counts(src.identities, src.images, src.tail_exponent, cfg.seed ^ sid)?;

        let mut records = Vec::with_capacity(src.images);
        let mut rows = Vec::with_capacity(src.images);
        let mut clean = Vec::with_capacity(src.images);
        let mut sample = 0u64;
        for (id, &count) in counts.iter().enumerate() {
            let mut irng = rng::stream(cfg.seed, purpose::SYNTH_IDENTITY, sid, id as u64);
            let z = gaussian_vec(&mut irng, cfg.identity_dim);
            let scale = cfg.identity_scale / (cfg.identity_dim as f64).sqrt();
            let mut centroid = vec![0.0; dim];
            for (zk, bk) in z.iter().zip(&basis) {
                for (c, b) in centroid.iter_mut().zip(bk) {
                    *c += scale * zk * b;
                }
            }
            let appear = irng.random_range(0..cfg.time_horizon);
            for _ in 0..count {
                let mut srng = rng::stream(cfg.seed, purpose::SYNTH_SAMPLE, sid, sample);
                let cam = srng.random_range(0..src.cameras);
                let jitter = if cfg.time_spread > 0 {
                    srng.random_range(-cfg.time_spread..=cfg.time_spread)
                } else {
                    0
                };
                let noise = scaled_gaussian(&mut srng, dim, cfg.noise_sigma);
                let raw: Vec<f64> = (0..dim)
                    .map(|k| centroid[k] + domain[k] + cameras[cam][k] + noise[k])
                    .collect();
                records.push(RawRecord {
                    image_id: format!("s{source_id}_{sample:06}"),
                    local_class: id as u32,
                    camera_id: Some(cam as i64),
                    timestamp: Some(appear + jitter),
                    split: Split::Train,
                });
                rows.push(normalize32(&raw));
                clean.push(centroid.clone());
                sample += 1;
            }
        }
        manifests.push(SourceManifest::new(source_id, records)?);
        features.push(rows);
        centroids.push(clean);
    }
    Ok(SynthDataset {
        manifests,
        features,
        centroids,
    })
}

/// Per-class image counts of a manifest (for logging long-tail premises).
pub fn class_histogram(manifest: &SourceManifest) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for r in &manifest.records {
        *h.entry(r.local_class).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, judgments_from_meta, EvalConfig, Protocol};
    use crate::retrieval::{rank_gallery, EmbeddingMeta, EmbeddingStore};

    #[test]
    fn counts_conserve_and_cover() {
        for exp in [0.0, 1.0, 2.0, 3.5] {
            let c = long_tail_counts(10, 100, exp, 3).unwrap();
            assert_eq!(c.iter().sum::<usize>(), 100);
            assert!(c.iter().all(|&n| n >= 1));
        }
        let flat = long_tail_counts(10, 100, 0.0, 3).unwrap();
        assert!(flat.iter().all(|&n| n == 10));
        let skew = long_tail_counts(10, 100, 2.0, 3).unwrap();
        assert!(*skew.iter().max().unwrap() as f64 > 10.0);
        assert!(long_tail_counts(10, 9, 1.0, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 99,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        crate::io::write_embeddings(&mut ba, &a.source_embeddings(1)).unwrap();
        crate::io::write_embeddings(&mut bb, &b.source_embeddings(1)).unwrap();
        assert_eq!(ba, bb);
        let c = generate(&SynthConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn rejects_degenerate_sources() {
        let mut cfg = SynthConfig::default();
        cfg.sources[0].identities = 1;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn noiseless_single_camera_is_perfectly_separable() {
        let cfg = SynthConfig {
            sources: vec![SynthSource {
                identities: 8,
                images: 40,
                tail_exponent: 0.0,
                cameras: 1,
            }],
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let space = data.label_space().unwrap();
        let records = data.records(&space, &[1]).unwrap();
        for (a, b) in records.iter().zip(&records[1..]) {
            if a.global_class == b.global_class {
                assert_eq!(a.feature, b.feature);
            }
        }
        let rows: Vec<Vec<f64>> = records
            .iter()
            .map(|r| r.feature.as_ref().unwrap().iter().map(|&v| v as f64).collect())
            .collect();
        let meta: Vec<EmbeddingMeta> = records.iter().map(EmbeddingMeta::from).collect();
        let store = EmbeddingStore::from_rows(&rows, meta.clone()).unwrap();
        let ranking = rank_gallery(&store, &store).unwrap();
        let j = judgments_from_meta(&meta, &meta, Protocol::Plain);
        let report = evaluate(&ranking, &j, &EvalConfig::default()).unwrap();
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn generated_manifests_validate() {
        let cfg = SynthConfig {
            sources: vec![
                SynthSource {
                    identities: 5,
                    images: 30,
                    tail_exponent: 2.0,
                    cameras: 3,
                },
                SynthSource {
                    identities: 7,
                    images: 21,
                    tail_exponent: 0.0,
                    cameras: 2,
                },
            ],
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for m in &data.manifests {
            m.validate().unwrap();
        }
        let space = data.label_space().unwrap();
        assert_eq!(space.num_classes, 12);
        assert_eq!(data.records(&space, &[1, 2]).unwrap().len(), 51);
        assert_eq!(class_histogram(&data.manifests[0]).values().sum::<usize>(), 30);
    }
}
