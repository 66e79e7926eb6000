use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::postprocess::{DbscanConfig, PipelineConfig, PipelineInputs, ViewSet};
use crate::retrieval::EmbeddingMeta;
use crate::rng::{self, purpose};
use crate::synth::scaled_gaussian;

/// Multi-model, multi-view retrieval data for post-processing experiments.
///
/// Every identity is photographed by several cameras. Queries come from
/// `queries_per_identity` distinct cameras and the identity's gallery images
/// from the remaining cameras, so every camera also holds images of other
/// identities that look alike through the shared camera offset. Each image
/// has several views (crops) with independent view noise, and each model
/// sees the image through its own random linear map plus per-image model
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostBenchConfig {
    pub identities: usize,
    pub queries_per_identity: usize,
    pub gallery_per_identity: usize,
    pub cameras: usize,
    pub feature_dim: usize,
    pub models: usize,
    pub views: usize,
    pub identity_scale: f64,
    pub camera_scale: f64,
    pub image_noise: f64,
    pub view_noise: f64,
    pub model_noise: f64,
    /// Spread of the per-model linear maps around the identity.
    pub model_distortion: f64,
    pub seed: u64,
}

impl Default for PostBenchConfig {
    fn default() -> Self {
        PostBenchConfig {
            identities: 60,
            queries_per_identity: 3,
            gallery_per_identity: 8,
            cameras: 8,
            feature_dim: 48,
            models: 3,
            views: 3,
            identity_scale: 1.0,
            camera_scale: 0.4,
            image_noise: 0.8,
            view_noise: 0.4,
            model_noise: 0.4,
            model_distortion: 0.3,
            seed: 0,
        }
    }
}

impl PostBenchConfig {
    /// Pipeline settings tuned for this data: query clusters form at
    /// cosine distance 0.4 without chaining identities together.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            dbscan: DbscanConfig { eps: 0.4, min_pts: 2 },
            eval: Some(EvalConfig::default()),
            ..PipelineConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.queries_per_identity == 0 || self.gallery_per_identity == 0 {
            return Err(Error::config("need >= 2 identities and >= 1 query and gallery image each"));
        }
        if self.queries_per_identity >= self.cameras {
            return Err(Error::config("queries_per_identity must leave cameras for the gallery"));
        }
        if self.feature_dim < 2 || self.models == 0 || self.views == 0 {
            return Err(Error::config("need feature_dim >= 2, models >= 1 and views >= 1"));
        }
        let scales = [
            self.identity_scale,
            self.camera_scale,
            self.image_noise,
            self.view_noise,
            self.model_noise,
            self.model_distortion,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("scales must be finite and non-negative"));
        }
        Ok(())
    }
}

const KIND_IDENTITY: u64 = 0;
const KIND_CAMERA: u64 = 1;
const KIND_LAYOUT: u64 = 2;
const KIND_IMAGE: u64 = 3;

pub fn generate_post_bench(cfg: &PostBenchConfig) -> Result<PipelineInputs> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let seed = cfg.seed;
    let centroid = |id: usize| {
        scaled_gaussian(&mut rng::stream(seed, purpose::SYNTH_POST, KIND_IDENTITY, id as u64), dim, cfg.identity_scale)
    };
    let cameras: Vec<Vec<f64>> = (0..cfg.cameras)
        .map(|c| scaled_gaussian(&mut rng::stream(seed, purpose::SYNTH_POST, KIND_CAMERA, c as u64), dim, cfg.camera_scale))
        .collect();
    let maps: Vec<Vec<Vec<f64>>> = (0..cfg.models)
        .map(|m| {
            let mut r = rng::stream(seed, purpose::SYNTH_MODEL, m as u64, 0);
            (0..dim)
                .map(|i| {
                    let mut row = scaled_gaussian(&mut r, dim, cfg.model_distortion);
                    row[i] += 1.0;
                    row
                })
                .collect()
        })
        .collect();

    // (identity, camera, is_query) per image, queries first within identity
    let mut images: Vec<(usize, usize, bool)> = Vec::new();
    for id in 0..cfg.identities {
        let mut r = rng::stream(seed, purpose::SYNTH_POST, KIND_LAYOUT, id as u64);
        let cams = sample(&mut r, cfg.cameras, cfg.queries_per_identity).into_vec();
        let others: Vec<usize> = (0..cfg.cameras).filter(|c| !cams.contains(c)).collect();
        for &c in &cams {
            images.push((id, c, true));
        }
        for k in 0..cfg.gallery_per_identity {
            images.push((id, others[k % others.len()], false));
        }
    }
    let centroids: Vec<Vec<f64>> = (0..cfg.identities).map(centroid).collect();

    let empty_side = || ViewSet {
        models: vec![Vec::new(); cfg.models],
        meta: Vec::new(),
        cam_clusters: None,
    };
    let mut query = empty_side();
    let mut gallery = empty_side();
    for (n, &(id, cam, is_query)) in images.iter().enumerate() {
        let mut r = rng::stream(seed, purpose::SYNTH_POST, KIND_IMAGE, n as u64);
        let noise = scaled_gaussian(&mut r, dim, cfg.image_noise);
        let base: Vec<f64> = (0..dim)
            .map(|k| centroids[id][k] + cameras[cam][k] + noise[k])
            .collect();
        let views: Vec<Vec<f64>> = (0..cfg.views)
            .map(|v| {
                let vn = scaled_gaussian(&mut rng::stream(seed, purpose::SYNTH_VIEW, n as u64, v as u64), dim, cfg.view_noise);
                base.iter().zip(vn).map(|(b, e)| b + e).collect()
            })
            .collect();
        let side = if is_query { &mut query } else { &mut gallery };
        for (m, map) in maps.iter().enumerate() {
            let mn = scaled_gaussian(&mut rng::stream(seed, purpose::SYNTH_MODEL, m as u64, n as u64 + 1), dim, cfg.model_noise);
            let per_view = views
                .iter()
                .map(|x| {
                    map.iter()
                        .zip(&mn)
                        .map(|(row, e)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + e)
                        .collect()
                })
                .collect();
            side.models[m].push(per_view);
        }
        side.meta.push(EmbeddingMeta {
            image_id: format!("{}{n:06}", if is_query { "q" } else { "g" }),
            source_id: 1,
            class: id as u32,
            camera_id: Some(cam as i64),
            timestamp: None,
        });
    }
    Ok(PipelineInputs { query, gallery })
}
