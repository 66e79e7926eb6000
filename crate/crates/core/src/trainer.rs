//! Two-stage training of the embedding head.
//!
//! Stage I trains on the pooled multi-source data with one merged label
//! space; pooling the sources realizes the per-source double sum of the
//! objective, with every source weighted by its size. Stage II replaces the
//! classifier and fine-tunes everything on the target source alone.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MergedLabelSpace, SampleRecord};
use crate::embedhead::{cross_entropy, HeadConfig, HeadParameters, LrSchedule, Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Every record once per epoch, shuffled.
    #[default]
    Naive,
    /// Class drawn uniformly, then a record uniformly within the class.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
    /// Draws per epoch for the balanced sampler; defaults to the dataset size.
    pub balanced_draws: Option<usize>,
    /// A final short batch smaller than this is folded into the preceding
    /// batch. The default of 1 keeps every short batch as is.
    pub min_batch: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig {
            epochs: 60,
            batch_size: 36,
            schedule: LrSchedule::stage1(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            sampler: SamplerKind::Naive,
            balanced_draws: None,
            min_batch: 1,
        }
    }

    pub fn stage2() -> Self {
        StageConfig {
            epochs: 12,
            schedule: LrSchedule::stage2(),
            ..Self::stage1()
        }
    }

    /// Deserializes a partial config over the stage-II defaults rather than
    /// the stage-I ones the plain `Deserialize` impl falls back to. Use with
    /// `#[serde(deserialize_with = ...)]` on stage-II fields.
    pub fn deserialize_stage2<'de, D>(d: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as _;
        let patch = serde_json::Value::deserialize(d)?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(D::Error::custom("stage config must be an object"));
        };
        let mut base = serde_json::to_value(Self::stage2()).map_err(D::Error::custom)?;
        if let Some(obj) = base.as_object_mut() {
            obj.extend(patch);
        }
        serde_json::from_value(base).map_err(D::Error::custom)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "lr", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.10}", e.loss),
                format!("{}", e.lr),
                format!("{:.6}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense features and labels ready for training.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl TrainingSet {
    pub fn from_records(records: &[SampleRecord], space: &MergedLabelSpace) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("no training records"));
        }
        let missing: Vec<&str> = records
            .iter()
            .filter(|r| r.feature.is_none())
            .map(|r| r.image_id.as_str())
            .collect();
        if !missing.is_empty() {
            let shown = missing.iter().take(10).copied().collect::<Vec<_>>().join(", ");
            return Err(Error::data(format!(
                "{} records have no feature vector: {shown}{}",
                missing.len(),
                if missing.len() > 10 { ", ..." } else { "" }
            )));
        }
        let dim = crate::dataset::check_uniform_dim(
            records.iter().map(|r| r.feature.as_ref().unwrap().len()),
        )?
        .unwrap();
        let c = space.num_classes as usize;
        let mut flat = Vec::with_capacity(records.len() * dim);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if r.global_class as usize >= c {
                return Err(Error::data(format!(
                    "record {} has class {} outside a space of {c}",
                    r.image_id, r.global_class
                )));
            }
            flat.extend(r.feature.as_ref().unwrap().iter().map(|&v| v as f64));
            labels.push(r.global_class);
        }
        Ok(TrainingSet {
            features: Array2::from_shape_vec((records.len(), dim), flat).unwrap(),
            labels,
            num_classes: c,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A shuffled permutation of `0..n`, deterministic in `(seed, epoch)`.
pub fn naive_sampler(n: usize, seed: u64, epoch: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::data("cannot sample from zero records"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose::NAIVE_SAMPLER, epoch as u64, 0));
    Ok(order)
}

/// `draws` record indices: a class uniformly at random, then a record
/// uniformly within that class.
pub fn balanced_sampler(labels: &[u32], seed: u64, epoch: usize, draws: usize) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::data("cannot sample from zero records"));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let mut rng = rng::stream(seed, purpose::BALANCED_SAMPLER, epoch as u64, 0);
    Ok((0..draws)
        .map(|_| {
            let members = classes[rng.random_range(0..classes.len())];
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

fn epoch_order(set: &TrainingSet, cfg: &StageConfig, epoch: usize) -> Result<Vec<usize>> {
    match cfg.sampler {
        SamplerKind::Naive => naive_sampler(set.len(), cfg.seed, epoch),
        SamplerKind::Balanced => balanced_sampler(
            &set.labels,
            cfg.seed,
            epoch,
            cfg.balanced_draws.unwrap_or(set.len()),
        ),
    }
}

/// Split `n` ordered samples into consecutive batches of `batch_size`. The
/// final short batch is kept unless it is smaller than `min_batch`, in which
/// case it joins the batch before it.
pub fn batch_ranges(n: usize, batch_size: usize, min_batch: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < min_batch) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Run `cfg.epochs` epochs of mini-batch SGD on the batch-mean cross-entropy.
/// The final short batch of an epoch is kept (see [`batch_ranges`]).
pub fn train_epochs(params: &mut HeadParameters, set: &TrainingSet, cfg: &StageConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if set.num_classes != params.num_classes() {
        return Err(Error::Dimension {
            expected: params.num_classes(),
            got: set.num_classes,
            context: "label space vs classifier width",
        });
    }
    let mut sgd = Sgd::new(SgdConfig {
        lr: cfg.schedule.lr_at_epoch(0),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    })?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at_epoch(epoch);
        sgd.set_lr(lr)?;
        let order = epoch_order(set, cfg, epoch)?;
        let mut loss_sum = 0.0;
        for range in batch_ranges(order.len(), cfg.batch_size, cfg.min_batch) {
            let batch = &order[range];
            let x = set.features.select(Axis(0), batch);
            let y: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
            let (_, pred, cache) = params.forward_train(x.view())?;
            let loss = cross_entropy(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            let grads = params.backward(&cache, &y)?;
            sgd.step(params, &grads)?;
        }
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / order.len() as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            checksum: params.checksum(),
        });
    }
    Ok(log)
}

/// Stage I: a fresh head trained on pooled multi-source records.
pub fn train_stage1(
    records: &[SampleRecord],
    space: &MergedLabelSpace,
    head: &HeadConfig,
    cfg: &StageConfig,
) -> Result<(HeadParameters, TrainLog)> {
    cfg.validate()?;
    let set = TrainingSet::from_records(records, space)?;
    let mut params = HeadParameters::init(set.features.ncols(), set.num_classes, head, cfg.seed)?;
    let log = train_epochs(&mut params, &set, cfg)?;
    Ok((params, log))
}

/// Stage II: swap in a new classifier sized for `target_space`, then
/// fine-tune projection and classifier jointly on the target records.
///
/// `records` must carry class ids of `target_space`.
pub fn train_stage2(
    params: &HeadParameters,
    records: &[SampleRecord],
    target_space: &MergedLabelSpace,
    cfg: &StageConfig,
) -> Result<(HeadParameters, TrainLog)> {
    cfg.validate()?;
    let set = TrainingSet::from_records(records, target_space)?;
    let present: BTreeSet<u32> = set.labels.iter().copied().collect();
    if present.len() != set.num_classes {
        let absent: Vec<u32> = (0..set.num_classes as u32).filter(|c| !present.contains(c)).collect();
        return Err(Error::data(format!(
            "target classes without training data: {absent:?}"
        )));
    }
    if set.features.ncols() != params.input_dim() {
        return Err(Error::Dimension {
            expected: params.input_dim(),
            got: set.features.ncols(),
            context: "target features vs head input",
        });
    }
    let mut tuned = params.clone();
    tuned.swap_classifier(set.num_classes, cfg.seed)?;
    let log = train_epochs(&mut tuned, &set, cfg)?;
    Ok((tuned, log))
}

/// Re-express record labels through a translation table (e.g. from
/// [`crate::dataset::remap_for_target`]).
pub fn relabel(records: &[SampleRecord], table: &BTreeMap<u32, u32>) -> Result<Vec<SampleRecord>> {
    records
        .iter()
        .map(|r| {
            let global_class = *table.get(&r.global_class).ok_or_else(|| {
                Error::data(format!("class {} has no translation", r.global_class))
            })?;
            Ok(SampleRecord {
                global_class,
                ..r.clone()
            })
        })
        .collect()
}

/// Angular margin statistics of embeddings against classifier weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub per_class: BTreeMap<u32, f64>,
    pub mean: f64,
}

/// Per sample: cosine to its own class weight minus the largest cosine to
/// any other class weight. Averaged per class and overall.
pub fn margin_probe(params: &HeadParameters, features: ArrayView2<f64>, labels: &[u32]) -> Result<MarginReport> {
    params
        .validate()
        .map_err(|e| Error::numeric(format!("head is not usable for margin probing: {e}")))?;
    let c = params.num_classes();
    if c < 2 {
        return Err(Error::config("margins need at least 2 classes"));
    }
    if labels.len() != features.nrows() {
        return Err(Error::Dimension {
            expected: features.nrows(),
            got: labels.len(),
            context: "labels vs features",
        });
    }
    let f = params.embed(features)?;
    margins_from_embeddings(&f, &params.classifier_weight, labels)
}

pub(crate) fn margins_from_embeddings(
    f: &Array2<f64>,
    weights: &Array2<f64>,
    labels: &[u32],
) -> Result<MarginReport> {
    let c = weights.ncols();
    let w_norms: Vec<f64> = weights.columns().into_iter().map(|w| w.dot(&w).sqrt()).collect();
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (row, &y) in f.rows().into_iter().zip(labels) {
        if y as usize >= c {
            return Err(Error::data(format!("label {y} out of range for {c} classes")));
        }
        let fnorm = row.dot(&row).sqrt();
        let cos = |k: usize| {
            let d = fnorm * w_norms[k];
            if d == 0.0 {
                0.0
            } else {
                row.dot(&weights.column(k)) / d
            }
        };
        let own = cos(y as usize);
        let other = (0..c)
            .filter(|&k| k != y as usize)
            .map(cos)
            .fold(f64::NEG_INFINITY, f64::max);
        let m = own - other;
        let e = sums.entry(y).or_insert((0.0, 0));
        e.0 += m;
        e.1 += 1;
        total += m;
    }
    if labels.is_empty() {
        return Err(Error::data("no samples to probe"));
    }
    Ok(MarginReport {
        per_class: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        mean: total / labels.len() as f64,
    })
}
