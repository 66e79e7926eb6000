//! Trainable embedding head: `fc1 -> batch-norm -> classifier`.
//!
//! The embedding `f` is the batch-norm output. Everything runs in `f64` so the
//! hand-written backward pass can be checked against finite differences.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            embed_dim: 512,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter tensors, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Fc1Weight,
    Fc1Bias,
    BnGamma,
    BnBeta,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::Fc1Weight,
        ParamKind::Fc1Bias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::ClassifierWeight,
        ParamKind::ClassifierBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Fc1Weight => "fc1_weight",
            ParamKind::Fc1Bias => "fc1_bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::ClassifierWeight => "classifier_weight",
            ParamKind::ClassifierBias => "classifier_bias",
        }
    }

    fn decayed(self) -> bool {
        !matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }

    fn is_classifier(self) -> bool {
        matches!(self, ParamKind::ClassifierWeight | ParamKind::ClassifierBias)
    }
}

/// Head weights. `fc1_*` and `bn_*` form the feature projection; the
/// classifier maps embeddings to class logits.
#[derive(Debug, Clone)]
pub struct HeadParameters {
    /// `d_in x embed_dim`
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    /// `embed_dim x num_classes`
    pub classifier_weight: Array2<f64>,
    pub classifier_bias: Array1<f64>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Bumped on every parameter mutation; ties a cache to the weights that
    /// produced it.
    generation: u64,
}

impl PartialEq for HeadParameters {
    fn eq(&self, other: &Self) -> bool {
        self.fc1_weight == other.fc1_weight
            && self.fc1_bias == other.fc1_bias
            && self.bn_gamma == other.bn_gamma
            && self.bn_beta == other.bn_beta
            && self.bn_running_mean == other.bn_running_mean
            && self.bn_running_var == other.bn_running_var
            && self.classifier_weight == other.classifier_weight
            && self.classifier_bias == other.classifier_bias
            && self.bn_eps == other.bn_eps
            && self.bn_momentum == other.bn_momentum
    }
}

/// Logits and class probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

/// Intermediates of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    embeddings: Array2<f64>,
    probabilities: Array2<f64>,
    generation: u64,
}

/// Gradients shaped like the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub classifier_weight: Array2<f64>,
    pub classifier_bias: Array1<f64>,
}

impl Gradients {
    pub fn get(&self, kind: ParamKind) -> &[f64] {
        let s = match kind {
            ParamKind::Fc1Weight => self.fc1_weight.as_slice(),
            ParamKind::Fc1Bias => self.fc1_bias.as_slice(),
            ParamKind::BnGamma => self.bn_gamma.as_slice(),
            ParamKind::BnBeta => self.bn_beta.as_slice(),
            ParamKind::ClassifierWeight => self.classifier_weight.as_slice(),
            ParamKind::ClassifierBias => self.classifier_bias.as_slice(),
        };
        s.expect("gradients are contiguous")
    }
}

fn uniform_fill(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn classifier_init(embed_dim: usize, num_classes: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut rng = rng::stream(seed, purpose::HEAD_CLASSIFIER, 0, 0);
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let w = Array2::from_shape_vec(
        (embed_dim, num_classes),
        uniform_fill(&mut rng, embed_dim * num_classes, bound),
    )
    .unwrap();
    let b = Array1::from(uniform_fill(&mut rng, num_classes, bound));
    (w, b)
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite values in {what}")))
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

impl HeadParameters {
    /// Fresh head with fan-in scaled uniform weights, `gamma = 1`, `beta = 0`
    /// and running statistics `(0, 1)`.
    pub fn init(d_in: usize, num_classes: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if d_in == 0 || cfg.embed_dim == 0 {
            return Err(Error::config("input and embedding dimensions must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        let h = cfg.embed_dim;
        let mut rng = rng::stream(seed, purpose::HEAD_FC1, 0, 0);
        let bound = 1.0 / (d_in as f64).sqrt();
        let fc1_weight =
            Array2::from_shape_vec((d_in, h), uniform_fill(&mut rng, d_in * h, bound)).unwrap();
        let fc1_bias = Array1::from(uniform_fill(&mut rng, h, bound));
        let (classifier_weight, classifier_bias) = classifier_init(h, num_classes, seed);
        Ok(HeadParameters {
            fc1_weight,
            fc1_bias,
            bn_gamma: Array1::ones(h),
            bn_beta: Array1::zeros(h),
            bn_running_mean: Array1::zeros(h),
            bn_running_var: Array1::ones(h),
            classifier_weight,
            classifier_bias,
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
            generation: 0,
        })
    }

    /// Assemble a head from raw tensors (checkpoint loading, tests).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        fc1_weight: Array2<f64>,
        fc1_bias: Array1<f64>,
        bn_gamma: Array1<f64>,
        bn_beta: Array1<f64>,
        bn_running_mean: Array1<f64>,
        bn_running_var: Array1<f64>,
        classifier_weight: Array2<f64>,
        classifier_bias: Array1<f64>,
        bn_eps: f64,
        bn_momentum: f64,
    ) -> Result<Self> {
        let p = HeadParameters {
            fc1_weight,
            fc1_bias,
            bn_gamma,
            bn_beta,
            bn_running_mean,
            bn_running_var,
            classifier_weight,
            classifier_bias,
            bn_eps,
            bn_momentum,
            generation: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.embed_dim();
        let dims_ok = self.fc1_bias.len() == h
            && self.bn_gamma.len() == h
            && self.bn_beta.len() == h
            && self.bn_running_mean.len() == h
            && self.bn_running_var.len() == h
            && self.classifier_weight.nrows() == h
            && self.classifier_bias.len() == self.num_classes();
        if !dims_ok {
            return Err(Error::data("inconsistent head tensor shapes"));
        }
        if self.bn_running_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::numeric("batch-norm running variance must be positive"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("batch-norm epsilon must be positive"));
        }
        for kind in ParamKind::ALL {
            check_finite(self.slice(kind), kind.name())?;
        }
        check_finite(self.bn_running_mean.iter(), "bn_running_mean")?;
        check_finite(self.bn_running_var.iter(), "bn_running_var")
    }

    pub fn input_dim(&self) -> usize {
        self.fc1_weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.fc1_weight.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.ncols()
    }

    pub fn slice(&self, kind: ParamKind) -> &[f64] {
        let s = match kind {
            ParamKind::Fc1Weight => self.fc1_weight.as_slice(),
            ParamKind::Fc1Bias => self.fc1_bias.as_slice(),
            ParamKind::BnGamma => self.bn_gamma.as_slice(),
            ParamKind::BnBeta => self.bn_beta.as_slice(),
            ParamKind::ClassifierWeight => self.classifier_weight.as_slice(),
            ParamKind::ClassifierBias => self.classifier_bias.as_slice(),
        };
        s.expect("parameters are contiguous")
    }

    pub fn slice_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        self.generation += 1;
        let s = match kind {
            ParamKind::Fc1Weight => self.fc1_weight.as_slice_mut(),
            ParamKind::Fc1Bias => self.fc1_bias.as_slice_mut(),
            ParamKind::BnGamma => self.bn_gamma.as_slice_mut(),
            ParamKind::BnBeta => self.bn_beta.as_slice_mut(),
            ParamKind::ClassifierWeight => self.classifier_weight.as_slice_mut(),
            ParamKind::ClassifierBias => self.classifier_bias.as_slice_mut(),
        };
        s.expect("parameters are contiguous")
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
                context: "head input features",
            });
        }
        if x.nrows() == 0 {
            return Err(Error::data("empty batch"));
        }
        check_finite(x.iter(), "head input")
    }

    fn predict(&self, embeddings: &Array2<f64>) -> Prediction {
        let logits = embeddings.dot(&self.classifier_weight) + &self.classifier_bias;
        let probabilities = softmax_rows(&logits);
        Prediction {
            logits,
            probabilities,
        }
    }

    /// Embeddings from running statistics. Never mutates the head.
    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut z = x.dot(&self.fc1_weight) + &self.fc1_bias;
        Zip::from(z.columns_mut())
            .and(&self.bn_running_mean)
            .and(&self.bn_running_var)
            .and(&self.bn_gamma)
            .and(&self.bn_beta)
            .for_each(|mut col, &m, &v, &g, &b| {
                let scale = g / (v + self.bn_eps).sqrt();
                col.mapv_inplace(|z| (z - m) * scale + b);
            });
        Ok(z)
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Prediction)> {
        let f = self.embed(x)?;
        let pred = self.predict(&f);
        Ok((f, pred))
    }

    /// Batch-statistics forward pass; updates running statistics.
    pub fn forward_train(
        &mut self,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Prediction, ForwardCache)> {
        self.check_input(&x)?;
        let n = x.nrows() as f64;
        let z = x.dot(&self.fc1_weight) + &self.fc1_bias;
        let mean = z.mean_axis(Axis(0)).unwrap();
        let centered = &z - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
        let normalized = &centered * &inv_std;
        let f = &normalized * &self.bn_gamma + &self.bn_beta;

        let m = self.bn_momentum;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        self.bn_running_mean = &self.bn_running_mean * (1.0 - m) + &mean * m;
        self.bn_running_var = &self.bn_running_var * (1.0 - m) + &var * (m * unbias);
        self.generation += 1;

        let pred = self.predict(&f);
        let cache = ForwardCache {
            input: x.to_owned(),
            normalized,
            inv_std,
            embeddings: f.clone(),
            probabilities: pred.probabilities.clone(),
            generation: self.generation,
        };
        Ok((f, pred, cache))
    }

    /// Mode-dispatching forward; the cache is present only in train mode.
    pub fn forward(
        &mut self,
        x: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, Prediction, Option<ForwardCache>)> {
        match mode {
            Mode::Train => {
                let (f, p, c) = self.forward_train(x)?;
                Ok((f, p, Some(c)))
            }
            Mode::Eval => {
                let (f, p) = self.forward_eval(x)?;
                Ok((f, p, None))
            }
        }
    }

    /// Gradients of the batch-mean cross-entropy.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u32]) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::numeric(
                "forward cache is stale: parameters changed since the forward pass",
            ));
        }
        let batch = cache.input.nrows();
        if labels.len() != batch {
            return Err(Error::Dimension {
                expected: batch,
                got: labels.len(),
                context: "labels vs cached batch",
            });
        }
        let c = self.num_classes();
        let n = batch as f64;
        let mut dlogits = cache.probabilities.clone();
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= c {
                return Err(Error::data(format!("label {y} out of range for {c} classes")));
            }
            dlogits[[i, y as usize]] -= 1.0;
        }
        dlogits /= n;

        let classifier_weight = cache.embeddings.t().dot(&dlogits);
        let classifier_bias = dlogits.sum_axis(Axis(0));
        let df = dlogits.dot(&self.classifier_weight.t());

        let xhat = &cache.normalized;
        let bn_gamma = (&df * xhat).sum_axis(Axis(0));
        let bn_beta = df.sum_axis(Axis(0));
        let dxhat = &df * &self.bn_gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
        let dz = (&dxhat * n - &sum_dxhat - xhat * &sum_dxhat_xhat) * &(&cache.inv_std / n);

        let fc1_weight = cache.input.t().dot(&dz);
        let fc1_bias = dz.sum_axis(Axis(0));
        Ok(Gradients {
            fc1_weight,
            fc1_bias,
            bn_gamma,
            bn_beta,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Replace the classifier with a freshly initialized one.
    ///
    /// The projection (`fc1` and batch-norm) is left bit-identical.
    pub fn swap_classifier(&mut self, new_class_count: usize, seed: u64) -> Result<()> {
        if new_class_count < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        let (w, b) = classifier_init(self.embed_dim(), new_class_count, seed);
        self.classifier_weight = w;
        self.classifier_bias = b;
        self.generation += 1;
        Ok(())
    }

    /// FNV-1a over the projection tensors (everything except the classifier).
    pub fn projection_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for kind in [
            ParamKind::Fc1Weight,
            ParamKind::Fc1Bias,
            ParamKind::BnGamma,
            ParamKind::BnBeta,
        ] {
            h.write_f64s(self.slice(kind));
        }
        h.write_f64s(self.bn_running_mean.as_slice().unwrap());
        h.write_f64s(self.bn_running_var.as_slice().unwrap());
        h.0
    }

    /// FNV-1a over every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv(self.projection_checksum());
        h.write_f64s(self.slice(ParamKind::ClassifierWeight));
        h.write_f64s(self.slice(ParamKind::ClassifierBias));
        h.0
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_f64s(&mut self, values: &[f64]) {
        for v in values {
            for b in v.to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
}

/// Cross-entropy of one sample: `-log q[label]`, computed from logits.
pub fn cross_entropy_single(logits: &[f64], label: u32) -> Result<f64> {
    let c = logits.len();
    if label as usize >= c {
        return Err(Error::data(format!("label {label} out of range for {c} classes")));
    }
    let row = ndarray::ArrayView1::from(logits);
    Ok(log_sum_exp(row) - logits[label as usize])
}

/// Batch-mean cross-entropy.
pub fn cross_entropy(pred: &Prediction, labels: &[u32]) -> Result<f64> {
    if labels.len() != pred.logits.nrows() {
        return Err(Error::Dimension {
            expected: pred.logits.nrows(),
            got: labels.len(),
            context: "labels vs predictions",
        });
    }
    if labels.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut total = 0.0;
    for (row, &y) in pred.logits.rows().into_iter().zip(labels) {
        if y as usize >= row.len() {
            return Err(Error::data(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        total += log_sum_exp(row) - row[y as usize];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum and coupled weight decay:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
/// Batch-norm scale and shift are not decayed.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: [Option<Vec<f64>>; 6],
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.momentum) || !(config.weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0, 1) and weight decay >= 0"));
        }
        Ok(Sgd {
            config,
            velocity: Default::default(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.config.lr = lr;
        Ok(())
    }

    /// Drop momentum buffers of the classifier (after a classifier swap).
    pub fn reset_classifier(&mut self) {
        for kind in ParamKind::ALL.into_iter().filter(|k| k.is_classifier()) {
            self.velocity[kind as usize] = None;
        }
    }

    pub fn step(&mut self, params: &mut HeadParameters, grads: &Gradients) -> Result<()> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for kind in ParamKind::ALL {
            let g = grads.get(kind);
            let p = params.slice_mut(kind);
            if g.len() != p.len() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    got: g.len(),
                    context: "gradient vs parameter",
                });
            }
            let wd = if kind.decayed() { weight_decay } else { 0.0 };
            let v = self.velocity[kind as usize].get_or_insert_with(|| vec![0.0; p.len()]);
            if v.len() != p.len() {
                *v = vec![0.0; p.len()];
            }
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant step schedule: the rate is multiplied by `factor` at
/// each milestone epoch (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn stage1() -> Self {
        LrSchedule {
            base_lr: 0.02,
            milestones: vec![40],
            factor: 0.1,
        }
    }

    pub fn stage2() -> Self {
        LrSchedule {
            base_lr: 0.02,
            milestones: vec![8],
            factor: 0.1,
        }
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            milestones: vec![],
            factor: 0.1,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}
