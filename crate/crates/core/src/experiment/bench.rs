use serde::{Deserialize, Serialize};

use crate::dataset::{merge_label_spaces, resolve_records, split_train_val, MergedLabelSpace, SampleRecord, SourceId, SourceManifest, SplitSpec};
use crate::embedhead::{HeadConfig, HeadParameters};
use crate::error::{Error, Result};
use crate::eval::{evaluate, judgments_from_meta, EvalConfig, EvalReport};
use crate::postprocess::{pipeline, PipelineConfig, PipelineInputs, Step, ViewSet};
use crate::retrieval::{rank_gallery, EmbeddingMeta, EmbeddingStore};
use crate::synth::{SynthConfig, SynthSource};
use crate::trainer::{margin_probe, train_stage1, train_stage2, MarginReport, SamplerKind, StageConfig, TrainLog, TrainingSet};

/// Training and evaluation settings shared by every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBenchConfig {
    /// Source whose held-out classes are evaluated.
    pub target_source: SourceId,
    /// Target classes held out as validation identities.
    pub val_classes: usize,
    pub head: HeadConfig,
    pub stage1: StageConfig,
    #[serde(deserialize_with = "StageConfig::deserialize_stage2")]
    pub stage2: StageConfig,
    pub eval: EvalConfig,
}

impl Default for TrainBenchConfig {
    fn default() -> Self {
        TrainBenchConfig {
            target_source: 1,
            val_classes: 10,
            head: HeadConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainBenchConfig {
    /// Copy with every training seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.stage1.seed = seed;
        c.stage2.seed = seed;
        c
    }
}

/// The default synthetic benchmark: a target source and three small
/// auxiliary sources. All sources share the identity subspace and the
/// camera viewpoints; each has its own domain offset. Target identities are
/// too few to span the identity subspace, so auxiliary identities add
/// information the target alone lacks.
pub fn standard_synth(seed: u64) -> SynthConfig {
    let aux = SynthSource {
        identities: 10,
        images: 80,
        tail_exponent: 0.0,
        cameras: 4,
    };
    SynthConfig {
        sources: vec![
            SynthSource {
                identities: 32,
                images: 160,
                tail_exponent: 0.0,
                cameras: 4,
            },
            aux.clone(),
            aux.clone(),
            aux,
        ],
        feature_dim: 32,
        identity_dim: 30,
        identity_scale: 1.0,
        domain_scale: 0.5,
        camera_scale: 1.2,
        viewpoints: 4,
        noise_sigma: 0.8,
        seed,
        ..SynthConfig::default()
    }
}

/// Benchmark training settings: the full recipe with a smaller embedding.
pub fn standard_train() -> TrainBenchConfig {
    // Tiny trailing batches give batch-norm running statistics from a
    // handful of samples; fold them into the previous batch.
    let stage = |s: StageConfig| StageConfig {
        min_batch: s.batch_size / 2,
        ..s
    };
    TrainBenchConfig {
        head: HeadConfig {
            embed_dim: 64,
            ..HeadConfig::default()
        },
        stage1: stage(StageConfig::stage1()),
        stage2: stage(StageConfig::stage2()),
        val_classes: 16,
        ..TrainBenchConfig::default()
    }
}

/// One source's manifest with row-aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub manifest: SourceManifest,
    pub features: Vec<Vec<f32>>,
}

/// Materialized benchmark data for one seed: the target split and every
/// source's features.
#[derive(Debug, Clone)]
pub struct TrainBench {
    pub cfg: TrainBenchConfig,
    pub sources: Vec<SourceData>,
    pub split: SplitSpec,
    /// Target manifest restricted to its training classes.
    target_train: SourceData,
    query: EmbeddingStore,
    gallery: EmbeddingStore,
}

fn meta_for(m: &SourceManifest, i: usize) -> EmbeddingMeta {
    let r = &m.records[i];
    EmbeddingMeta {
        image_id: r.image_id.clone(),
        source_id: m.source_id,
        class: r.local_class,
        camera_id: r.camera_id,
        timestamp: r.timestamp,
    }
}

fn store_of(rows: Vec<Vec<f64>>, meta: Vec<EmbeddingMeta>) -> Result<EmbeddingStore> {
    EmbeddingStore::from_rows(&rows, meta)?.normalized()
}

impl TrainBench {
    pub fn new(cfg: TrainBenchConfig, sources: Vec<SourceData>, split_seed: u64) -> Result<Self> {
        for s in &sources {
            if s.features.len() != s.manifest.records.len() {
                return Err(Error::Dimension {
                    expected: s.manifest.records.len(),
                    got: s.features.len(),
                    context: "feature rows vs manifest records",
                });
            }
        }
        let target = sources
            .iter()
            .find(|s| s.manifest.source_id == cfg.target_source)
            .ok_or_else(|| Error::config(format!("target source {} not provided", cfg.target_source)))?;
        let split = split_train_val(&target.manifest, cfg.val_classes, split_seed)?;
        let pick = |idx: &[usize]| SourceData {
            manifest: SourceManifest {
                source_id: target.manifest.source_id,
                records: idx.iter().map(|&i| target.manifest.records[i].clone()).collect(),
            },
            features: idx.iter().map(|&i| target.features[i].clone()).collect(),
        };
        let target_train = pick(&split.train);
        let side = |idx: &[usize]| {
            let rows = idx
                .iter()
                .map(|&i| target.features[i].iter().map(|&v| v as f64).collect())
                .collect();
            let meta = idx.iter().map(|&i| meta_for(&target.manifest, i)).collect();
            store_of(rows, meta)
        };
        let query = side(&split.val_query)?;
        let gallery = side(&split.val_gallery)?;
        if query.is_empty() {
            return Err(Error::config("validation split has no queries"));
        }
        Ok(TrainBench {
            cfg,
            sources,
            split,
            target_train,
            query,
            gallery,
        })
    }

    /// Generate synthetic data with `seed` and build the benchmark; training
    /// seeds are set to `seed` as well.
    pub fn synthetic(synth: &SynthConfig, cfg: &TrainBenchConfig, seed: u64) -> Result<Self> {
        let data = crate::synth::generate(&SynthConfig {
            seed,
            ..synth.clone()
        })?;
        let sources = data
            .manifests
            .into_iter()
            .zip(data.features)
            .map(|(manifest, features)| SourceData { manifest, features })
            .collect();
        Self::new(cfg.with_seed(seed), sources, seed)
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(|s| s.manifest.source_id).collect()
    }

    fn aux(&self, id: SourceId) -> Result<&SourceData> {
        if id == self.cfg.target_source {
            return Err(Error::config(format!("source {id} is the target, not an auxiliary source")));
        }
        self.sources
            .iter()
            .find(|s| s.manifest.source_id == id)
            .ok_or_else(|| Error::config(format!("unknown auxiliary source {id}")))
    }

    /// Label space and records of the target training classes plus `aux`.
    pub fn training_records(&self, aux: &[SourceId]) -> Result<(MergedLabelSpace, Vec<SampleRecord>)> {
        let mut parts = vec![&self.target_train];
        for &a in aux {
            parts.push(self.aux(a)?);
        }
        let manifests: Vec<SourceManifest> = parts.iter().map(|p| p.manifest.clone()).collect();
        let space = merge_label_spaces(&manifests)?;
        let mut records = Vec::new();
        for p in parts {
            let n = records.len();
            records.extend(resolve_records(&p.manifest, &space, Some(&p.features), n)?);
        }
        Ok((space, records))
    }

    /// Stage I on the target training classes plus `aux`.
    pub fn stage1(&self, aux: &[SourceId], sampler: SamplerKind) -> Result<(HeadParameters, TrainLog)> {
        let (space, records) = self.training_records(aux)?;
        let cfg = StageConfig {
            sampler,
            ..self.cfg.stage1.clone()
        };
        train_stage1(&records, &space, &self.cfg.head, &cfg)
    }

    /// Stage II: classifier replaced and everything fine-tuned on the target.
    pub fn stage2(&self, params: &HeadParameters) -> Result<(HeadParameters, TrainLog)> {
        let (space, records) = self.training_records(&[])?;
        train_stage2(params, &records, &space, &self.cfg.stage2)
    }

    /// A fresh head trained on the target alone with the given stage
    /// settings.
    pub fn from_scratch(&self, stage: &StageConfig) -> Result<(HeadParameters, TrainLog)> {
        let (space, records) = self.training_records(&[])?;
        train_stage1(&records, &space, &self.cfg.head, stage)
    }

    fn embed_store(&self, params: &HeadParameters, store: &EmbeddingStore) -> Result<EmbeddingStore> {
        let x = store.data().mapv(|v| v as f64);
        let f = params.embed(x.view())?;
        let rows = f.rows().into_iter().map(|r| r.to_vec()).collect();
        store_of(rows, store.meta().to_vec())
    }

    /// Validation query and gallery embeddings; raw input features when
    /// `params` is `None`.
    pub fn embeddings(&self, params: Option<&HeadParameters>) -> Result<(EmbeddingStore, EmbeddingStore)> {
        match params {
            None => Ok((self.query.clone(), self.gallery.clone())),
            Some(p) => Ok((self.embed_store(p, &self.query)?, self.embed_store(p, &self.gallery)?)),
        }
    }

    /// Retrieval metrics of held-out target identities.
    pub fn evaluate(&self, params: Option<&HeadParameters>) -> Result<EvalReport> {
        let (q, g) = self.embeddings(params)?;
        let judgments = judgments_from_meta(q.meta(), g.meta(), self.cfg.eval.protocol);
        evaluate(&rank_gallery(&q, &g)?, &judgments, &self.cfg.eval)
    }

    /// Metrics after post-processing the validation retrieval; the last
    /// report is the final step.
    pub fn evaluate_post(
        &self,
        params: Option<&HeadParameters>,
        steps: &[Step],
        post: &PipelineConfig,
    ) -> Result<Vec<crate::postprocess::StepReport>> {
        let (q, g) = self.embeddings(params)?;
        let inputs = PipelineInputs {
            query: ViewSet::from_store(&q),
            gallery: ViewSet::from_store(&g),
        };
        let cfg = PipelineConfig {
            eval: Some(self.cfg.eval.clone()),
            ..post.clone()
        };
        Ok(pipeline(&inputs, steps, &cfg)?.reports)
    }

    /// Angular margins of the target training samples under a head trained
    /// with auxiliary sources `aux` (the label space it was trained on).
    pub fn target_margin(&self, params: &HeadParameters, aux: &[SourceId]) -> Result<MarginReport> {
        let (space, records) = self.training_records(aux)?;
        let target: Vec<SampleRecord> = records
            .into_iter()
            .filter(|r| r.source_id == self.cfg.target_source)
            .collect();
        let set = TrainingSet::from_records(&target, &space)?;
        margin_probe(params, set.features.view(), &set.labels)
    }
}
