//! Toy classifiers and verification-embedding models.
//!
//! Three architecture families stand in for distinct real-world model families:
//!
//! | tag        | topology                                                        |
//! |------------|-----------------------------------------------------------------|
//! | `plain`    | three 3×3 convs with average pooling, global pool, linear head  |
//! | `residual` | strided convs with one residual block per stage                 |
//! | `wide`     | two wide strided convs (5×5 then 3×3), global pool, linear head |
//!
//! All models are plain data after construction. Forward passes never touch parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::loss;
use crate::nn::{ops, params_fingerprint, Adam, Conv2d, Layer, Linear, Sequential, Tape};
use crate::partition::ClassSpace;
use crate::tensor::{argmax_rows, softmax_rows, Real, Tensor};

const INFER_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Plain,
    Residual,
    Wide,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Plain, Arch::Residual, Arch::Wide];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Plain => "plain",
            Arch::Residual => "residual",
            Arch::Wide => "wide",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown architecture {s:?} (plain|residual|wide)")))
    }
}

fn conv(i: usize, o: usize, k: usize, s: usize, rng: &mut impl Rng) -> Layer<f32> {
    Layer::Conv(Conv2d::new(i, o, k, s, k / 2, rng))
}

fn residual_block(c: usize, rng: &mut impl Rng) -> Layer<f32> {
    let first = Conv2d::new(c, c, 3, 1, 1, rng);
    let mut second = Conv2d::new(c, c, 3, 1, 1, rng);
    second.weight.scale(0.5);
    Layer::Residual(Sequential::new(vec![
        Layer::Conv(first),
        Layer::Relu,
        Layer::Conv(second),
    ]))
}

/// Builds the layer stack for `arch` ending in a linear layer with `outputs` units.
pub fn build_layers(arch: Arch, in_channels: usize, outputs: usize, rng: &mut impl Rng) -> Sequential<f32> {
    let layers = match arch {
        Arch::Plain => vec![
            conv(in_channels, 16, 3, 1, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(16, 32, 3, 1, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(32, 32, 3, 1, rng),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(32, outputs, rng)),
        ],
        Arch::Residual => vec![
            conv(in_channels, 16, 3, 2, rng),
            Layer::Relu,
            residual_block(16, rng),
            Layer::Relu,
            conv(16, 32, 3, 2, rng),
            Layer::Relu,
            residual_block(32, rng),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(32, outputs, rng)),
        ],
        Arch::Wide => vec![
            conv(in_channels, 32, 5, 2, rng),
            Layer::Relu,
            conv(32, 48, 3, 2, rng),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(48, outputs, rng)),
        ],
    };
    Sequential::new(layers)
}

/// A frozen, differentiable image model: layer stack plus optional unit-norm output.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub arch: Arch,
    pub layers: Sequential<T>,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub outputs: usize,
    pub normalize_output: bool,
}

pub struct NetworkTape<T> {
    inner: Tape<T>,
    /// Pre-normalisation output when `normalize_output` is set.
    raw: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Network<T> {
    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Input(format!(
                "model expects [B, {}, {}, {}], got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, NetworkTape<T>)> {
        self.check_input(x)?;
        let (y, inner) = self.layers.forward(x);
        if self.normalize_output {
            let unit = ops::normalize_rows(&y);
            Ok((
                unit.clone(),
                NetworkTape {
                    inner,
                    raw: Some((y, unit)),
                },
            ))
        } else {
            Ok((y, NetworkTape { inner, raw: None }))
        }
    }

    /// Outputs for a batch of any size, evaluated in chunks.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = x.dim(0);
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let chunk = if idx.len() == n { x.clone() } else { x.select(&idx) };
            let y = self.layers.infer(&chunk);
            parts.push(if self.normalize_output {
                ops::normalize_rows(&y)
            } else {
                y
            });
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.outputs]));
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>())
    }

    fn output_grad(&self, tape: &NetworkTape<T>, dy: &Tensor<T>) -> Tensor<T> {
        match &tape.raw {
            Some((raw, unit)) => ops::normalize_rows_backward(raw, unit, dy),
            None => dy.clone(),
        }
    }

    /// Gradient of a loss with respect to the input, given its gradient at the output.
    pub fn input_grad(&self, tape: &NetworkTape<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.output_grad(tape, dy);
        self.layers
            .backward(&tape.inner, d, None, true)
            .expect("input gradient requested")
    }

    /// Accumulates parameter gradients (aligned with [`Sequential::params`]).
    pub fn param_grads(&self, tape: &NetworkTape<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) {
        let d = self.output_grad(tape, dy);
        self.layers.backward(&tape.inner, d, Some(grads), false);
    }

    pub fn fingerprint(&self) -> String {
        params_fingerprint(&self.layers.params())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            layers: self.layers.cast(),
            input_shape: self.input_shape,
            outputs: self.outputs,
            normalize_output: self.normalize_output,
        }
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "arch": self.arch,
            "input_shape": self.input_shape,
            "outputs": self.outputs,
            "normalize_output": self.normalize_output,
        })
    }
}

impl Network<f32> {
    pub fn new(arch: Arch, input_shape: [usize; 3], outputs: usize, normalize_output: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            arch,
            layers: build_layers(arch, input_shape[0], outputs, &mut rng),
            input_shape,
            outputs,
            normalize_output,
        }
    }

    fn from_header(v: &serde_json::Value) -> Result<Self> {
        let bad = |f: &str| Error::Checkpoint(format!("model header lacks a valid {f}"));
        let arch: Arch = serde_json::from_value(v["arch"].clone()).map_err(|_| bad("arch"))?;
        let shape: [usize; 3] = serde_json::from_value(v["input_shape"].clone()).map_err(|_| bad("input_shape"))?;
        let outputs = v["outputs"].as_u64().ok_or_else(|| bad("outputs"))? as usize;
        let normalize = v["normalize_output"].as_bool().ok_or_else(|| bad("normalize_output"))?;
        Ok(Self::new(arch, shape, outputs, normalize, 0))
    }
}

/// Training provenance stored alongside a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub test_accuracy: f64,
    pub adversarially_finetuned: bool,
    #[serde(default)]
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[B, K]`, rows sum to 1.
    pub probabilities: Tensor<f32>,
    pub logits: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: Network<f32>,
    pub meta: ModelMeta,
}

impl Classifier {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        Self {
            net: Network::new(arch, input_shape, num_classes, false, seed),
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
        }
    }

    pub fn arch(&self) -> Arch {
        self.net.arch
    }

    pub fn num_classes(&self) -> usize {
        self.net.outputs
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.infer(x)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction> {
        let logits = self.logits(x)?;
        Ok(Prediction {
            labels: argmax_rows(&logits),
            probabilities: softmax_rows(&logits),
            logits,
        })
    }

    /// Fraction of correctly classified images.
    pub fn accuracy(&self, data: &LabeledImages) -> Result<f64> {
        let p = self.predict(&data.images)?;
        let correct = p.labels.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    /// Final-layer weights as a `D × K` class space, column `c` = class `c`.
    pub fn class_space(&self) -> Result<ClassSpace> {
        let head = self
            .net
            .layers
            .last_linear()
            .ok_or_else(|| Error::State("classifier has no linear head".into()))?;
        let (k, d) = (head.outputs(), head.inputs());
        let w = head.weight.data();
        let m = DMatrix::from_fn(d, k, |r, c| w[c * d + r] as f64);
        ClassSpace::new(m, (0..k).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.net.header();
        meta["model"] = serde_json::to_value(&self.meta)?;
        let params = self.net.layers.params();
        Checkpoint::new("classifier", meta, self.net.layers.param_names(""), &params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("classifier")?;
        let mut net = Network::from_header(&ck.meta)?;
        let names = net.layers.param_names("");
        ck.load_into(&names, net.layers.params_mut())?;
        let meta = serde_json::from_value(ck.meta["model"].clone())?;
        Ok(Self { net, meta })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub accuracy_floor: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            accuracy_floor: 0.85,
        }
    }
}

fn lr_at(base: f64, epoch: usize, epochs: usize) -> f64 {
    crate::nn::cosine_lr(base, epoch as f64 / epochs.max(1) as f64, 0.05)
}

/// Trains a classifier of the given architecture; fails if test accuracy is below the floor.
pub fn train_toy_classifier(
    train: &LabeledImages,
    test: &LabeledImages,
    arch: Arch,
    seed: u64,
    cfg: &ClassifierTrainConfig,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut model = Classifier::new(arch, train.image_shape(), train.num_classes, seed);
    let losses = fit_classifier(&mut model, train, seed, cfg, None)?;
    let acc = model.accuracy(test)?;
    model.meta.test_accuracy = acc;
    if acc < cfg.accuracy_floor {
        return Err(Error::Training {
            message: format!(
                "{arch} classifier reached {:.1}% test accuracy, below the {:.1}% floor",
                100.0 * acc,
                100.0 * cfg.accuracy_floor
            ),
            loss_tail: losses[losses.len().saturating_sub(20)..].to_vec(),
        });
    }
    Ok(model)
}

/// Untargeted single-step adversarial examples `clip(x + ε·sign(∇ CE))`.
fn fgsm(model: &Network<f32>, x: &Tensor<f32>, labels: &[usize], eps: f32) -> Result<Tensor<f32>> {
    let (logits, tape) = model.forward(x)?;
    let (_, dlogits) = loss::cross_entropy(&logits, labels)?;
    let g = model.input_grad(&tape, &dlogits);
    Ok(x.zip_map(&g, |v, d| {
        (v + eps * d.signum() * (d != 0.0) as u8 as f32).clamp(0.0, 1.0)
    }))
}

fn fit_classifier(
    model: &mut Classifier,
    train: &LabeledImages,
    seed: u64,
    cfg: &ClassifierTrainConfig,
    adversarial_eps: Option<f32>,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut adam = Adam::new(cfg.learning_rate, &model.net.layers.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut x = train.images.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            if let Some(eps) = adversarial_eps {
                // half of every batch is replaced by its adversarial counterpart
                let adv = fgsm(&model.net, &x, &y, eps)?;
                let half = batch.len() / 2;
                x.data_mut()[..half * train.images.item_len()]
                    .copy_from_slice(&adv.data()[..half * train.images.item_len()]);
            }
            let (logits, tape) = model.net.forward(&x)?;
            let (l, dlogits) = loss::cross_entropy(&logits, &y)?;
            if !l.is_finite() {
                return Err(Error::Training {
                    message: format!("non-finite classifier loss in epoch {epoch}"),
                    loss_tail: losses[losses.len().saturating_sub(20)..].to_vec(),
                });
            }
            losses.push(l);
            let mut grads = model.net.layers.zero_grads();
            model.net.param_grads(&tape, &dlogits, &mut grads);
            adam.step(&mut model.net.layers.params_mut(), &grads);
        }
    }
    Ok(losses)
}

/// Fine-tunes a copy of `model` on half-clean, half-FGSM batches.
pub fn adversarial_finetune(
    model: &Classifier,
    train: &LabeledImages,
    test: &LabeledImages,
    epsilon: f64,
    seed: u64,
    cfg: &ClassifierTrainConfig,
) -> Result<Classifier> {
    let mut tuned = model.clone();
    fit_classifier(&mut tuned, train, seed, cfg, Some(epsilon as f32))?;
    tuned.meta.adversarially_finetuned = true;
    tuned.meta.test_accuracy = tuned.accuracy(test)?;
    Ok(tuned)
}

/// Face-verification model: unit-norm embeddings compared by squared distance.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub net: Network<f32>,
    /// Pairs with squared distance strictly below this are judged the same identity.
    pub threshold: Option<f64>,
    pub meta: ModelMeta,
}

impl EmbeddingModel {
    pub fn new(arch: Arch, input_shape: [usize; 3], dim: usize, seed: u64) -> Self {
        Self {
            net: Network::new(arch, input_shape, dim, true, seed),
            threshold: None,
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
        }
    }

    pub fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.infer(x)
    }

    pub fn threshold(&self) -> Result<f64> {
        self.threshold
            .ok_or_else(|| Error::State("embedding model threshold is not calibrated".into()))
    }

    /// Same-identity decision for each row pair.
    pub fn verify(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<bool>> {
        let t = self.threshold()?;
        let d = loss::squared_distances(&self.embed(a)?, &self.embed(b)?);
        Ok(d.into_iter().map(|v| v < t).collect())
    }

    /// Sets the threshold maximising verification accuracy on the given pairs; returns that accuracy.
    pub fn calibrate(&mut self, a: &Tensor<f32>, b: &Tensor<f32>, same: &[bool]) -> Result<f64> {
        let d = loss::squared_distances(&self.embed(a)?, &self.embed(b)?);
        let (t, acc) = calibrate_threshold(&d, same)?;
        self.threshold = Some(t);
        Ok(acc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.net.header();
        meta["model"] = serde_json::to_value(&self.meta)?;
        meta["threshold"] = serde_json::json!(self.threshold);
        let params = self.net.layers.params();
        Checkpoint::new("embedding", meta, self.net.layers.param_names(""), &params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("embedding")?;
        let mut net = Network::from_header(&ck.meta)?;
        let names = net.layers.param_names("");
        ck.load_into(&names, net.layers.params_mut())?;
        Ok(Self {
            net,
            threshold: ck.meta["threshold"].as_f64(),
            meta: serde_json::from_value(ck.meta["model"].clone())?,
        })
    }
}

/// Threshold on distances maximising accuracy of `distance < threshold ⇔ same`.
///
/// Candidates are midpoints between consecutive sorted distances; ties go to the smaller
/// threshold.
pub fn calibrate_threshold(distances: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if distances.len() != same.len() || distances.is_empty() {
        return Err(Error::Input(
            "distances and labels must be non-empty and aligned".into(),
        ));
    }
    if same.iter().all(|&s| s) || same.iter().all(|&s| !s) {
        return Err(Error::Input(
            "calibration pairs need both same- and different-identity examples".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let n = distances.len() as f64;
    // threshold below everything: every pair judged different
    let mut correct = same.iter().filter(|&&s| !s).count() as i64;
    let mut best = (distances[idx[0]] - 1e-9, correct);
    for (pos, &i) in idx.iter().enumerate() {
        correct += if same[i] { 1 } else { -1 };
        let next = idx.get(pos + 1).map(|&j| distances[j]);
        if next == Some(distances[i]) {
            continue;
        }
        let t = match next {
            Some(v) => 0.5 * (distances[i] + v),
            None => distances[i] + 1e-9,
        };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingTrainConfig {
    pub dim: usize,
    pub steps: usize,
    /// Identities per batch; each contributes two images.
    pub identities_per_batch: usize,
    pub learning_rate: f64,
    pub margin: f64,
}

impl Default for EmbeddingTrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            steps: 600,
            identities_per_batch: 16,
            learning_rate: 2e-3,
            margin: 1.0,
        }
    }
}

/// Contrastive margin loss over every pair in the batch:
/// same identity `d²`, different identity `max(0, margin − d²)`.
fn pair_margin_loss(emb: &Tensor<f32>, ids: &[usize], margin: f64) -> (f64, Tensor<f32>) {
    let b = ids.len();
    let mut grad = Tensor::zeros(emb.shape());
    let mut total = 0.0;
    let pairs = (b * (b - 1) / 2).max(1) as f64;
    for i in 0..b {
        for j in i + 1..b {
            let d2: f64 = emb
                .item(i)
                .iter()
                .zip(emb.item(j))
                .map(|(a, c)| ((a - c) as f64).powi(2))
                .sum();
            let coef = if ids[i] == ids[j] {
                total += d2;
                1.0
            } else if d2 < margin {
                total += margin - d2;
                -1.0
            } else {
                0.0
            };
            if coef != 0.0 {
                let s = (2.0 * coef / pairs) as f32;
                for k in 0..emb.dim(1) {
                    let diff = emb.item(i)[k] - emb.item(j)[k];
                    grad.item_mut(i)[k] += s * diff;
                    grad.item_mut(j)[k] -= s * diff;
                }
            }
        }
    }
    (total / pairs, grad)
}

/// Trains an embedding model with a pairwise margin loss on identity-labelled images.
pub fn train_embedding_model(
    train: &LabeledImages,
    arch: Arch,
    seed: u64,
    cfg: &EmbeddingTrainConfig,
) -> Result<EmbeddingModel> {
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_id[l].push(i);
    }
    let ids: Vec<usize> = (0..by_id.len()).filter(|&c| by_id[c].len() >= 2).collect();
    if ids.len() < 2 {
        return Err(Error::Input("need at least two identities with two images each".into()));
    }
    let mut model = EmbeddingModel::new(arch, train.image_shape(), cfg.dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let mut adam = Adam::new(cfg.learning_rate, &model.net.layers.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.lr = lr_at(cfg.learning_rate, step, cfg.steps);
        let chosen: Vec<usize> = ids
            .choose_multiple(&mut rng, cfg.identities_per_batch.min(ids.len()))
            .copied()
            .collect();
        let mut batch = Vec::with_capacity(2 * chosen.len());
        let mut batch_ids = Vec::with_capacity(2 * chosen.len());
        for &c in &chosen {
            for &i in by_id[c].choose_multiple(&mut rng, 2) {
                batch.push(i);
                batch_ids.push(c);
            }
        }
        let x = train.images.select(&batch);
        let (emb, tape) = model.net.forward(&x)?;
        let (l, g) = pair_margin_loss(&emb, &batch_ids, cfg.margin);
        if !l.is_finite() {
            return Err(Error::Training {
                message: format!("non-finite embedding loss at step {step}"),
                loss_tail: losses[losses.len().saturating_sub(20)..].to_vec(),
            });
        }
        losses.push(l);
        let mut grads = model.net.layers.zero_grads();
        model.net.param_grads(&tape, &g, &mut grads);
        adam.step(&mut model.net.layers.params_mut(), &grads);
    }
    Ok(model)
}

/// Balanced verification pairs: for each image one same-identity and one different-identity partner.
pub fn verification_pairs(data: &LabeledImages, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_id[l].push(i);
    }
    let (mut a, mut b, mut same) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..data.len() {
        let li = data.labels[i];
        let mates: Vec<usize> = by_id[li].iter().copied().filter(|&j| j != i).collect();
        if let Some(&j) = mates.choose(&mut rng) {
            a.push(i);
            b.push(j);
            same.push(true);
        }
        let others: Vec<usize> = (0..data.len()).filter(|&j| data.labels[j] != li).collect();
        if let Some(&j) = others.choose(&mut rng) {
            a.push(i);
            b.push(j);
            same.push(false);
        }
    }
    (a, b, same)
}
