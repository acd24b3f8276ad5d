//! Training the conditional generator against a frozen model.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, Phase};
use crate::loss;
use crate::nn::{cosine_lr, Adam};
use crate::tensor::{argmax_rows, Tensor};
use crate::zoo::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    EmbeddingDistance,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "embed" | "embedding_distance" => Ok(LossKind::EmbeddingDistance),
            other => Err(Error::Parameter(format!("unknown loss {other:?} (ce|embed)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::EmbeddingDistance => "embed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Overrides the generator's own budget for the run.
    pub epsilon: f64,
    pub conditional_classes: Vec<usize>,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub probe_every: usize,
    pub probe_size: usize,
    /// Learning rate at the last iteration as a fraction of `learning_rate` (cosine decay);
    /// 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            max_iterations: 3000,
            epsilon: 16.0 / 255.0,
            conditional_classes: Vec::new(),
            loss_kind: LossKind::CrossEntropy,
            seed: 0,
            probe_every: 200,
            probe_size: 128,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            errs.push(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.final_lr_fraction
            ));
        }
        if self.conditional_classes.is_empty() {
            errs.push("conditional_classes must not be empty".into());
        }
        if let Some(c) = self.conditional_classes.iter().find(|&&c| c >= num_classes) {
            errs.push(format!("conditional class {c} outside [0, {num_classes})"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// What the generator is trained to fool.
pub enum TrainTarget<'a> {
    /// Frozen classifier; loss is targeted cross-entropy.
    Classifier(&'a Network<f32>),
    /// Frozen embedding model; loss is squared distance to `references.item(class)`.
    Embedding {
        model: &'a Network<f32>,
        /// `[num_ids, D]`, one fixed reference embedding per identity.
        references: &'a Tensor<f32>,
        /// Squared-distance threshold used for the probe, if calibrated.
        threshold: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    /// White-box targeted success (%) on the probe set, when measured.
    pub probe_success: Option<f64>,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first `n` iterations.
    pub fn leading_mean(&self, n: usize) -> f64 {
        let l = self.losses();
        let n = n.min(l.len()).max(1);
        l[..n.min(l.len())].iter().sum::<f64>() / n as f64
    }

    /// Mean loss over the last `n` iterations.
    pub fn trailing_mean(&self, n: usize) -> f64 {
        let l = self.losses();
        let n = n.min(l.len()).max(1);
        l[l.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "loss", "probe_success", "ms"])?;
        for r in &self.records {
            out.write_record([
                r.iteration.to_string(),
                format!("{:.9}", r.loss),
                r.probe_success.map(|p| format!("{p:.4}")).unwrap_or_default(),
                format!("{:.3}", r.ms),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// `b` images drawn uniformly with replacement and `b` independent uniform target classes.
pub fn sample_training_batch(
    images: &Tensor<f32>,
    classes: &[usize],
    b: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    if classes.is_empty() {
        return Err(Error::Input("no conditional classes".into()));
    }
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    let targets: Vec<usize> = (0..b).map(|_| *classes.choose(rng).expect("non-empty")).collect();
    Ok((images.select(&idx), targets))
}

/// Deterministic probe targets: image `i` is assigned `classes[i % len]`.
pub fn probe_targets(n: usize, classes: &[usize]) -> Vec<usize> {
    (0..n).map(|i| classes[i % classes.len()]).collect()
}

fn target_loss(target: &TrainTarget<'_>, adv: &Tensor<f32>, classes: &[usize]) -> Result<(f64, Tensor<f32>)> {
    match target {
        TrainTarget::Classifier(net) => {
            let (logits, tape) = net.forward(adv)?;
            let (l, d) = loss::cross_entropy(&logits, classes)?;
            Ok((l, net.input_grad(&tape, &d)))
        }
        TrainTarget::Embedding { model, references, .. } => {
            let (emb, tape) = model.forward(adv)?;
            let refs = references.select(classes);
            let (l, d) = loss::embedding_distance(&emb, &refs)?;
            Ok((l, model.input_grad(&tape, &d)))
        }
    }
}

/// White-box targeted success (%) of the generator on `probe`.
pub fn probe_success(
    generator: &Generator<f32>,
    target: &TrainTarget<'_>,
    probe: &Tensor<f32>,
    classes: &[usize],
) -> Result<Option<f64>> {
    let n = probe.dim(0);
    let targets = probe_targets(n, classes);
    let adv = generator.generate(probe, &targets, Phase::Eval)?.adversarial;
    let hits = match target {
        TrainTarget::Classifier(net) => {
            let pred = argmax_rows(&net.infer(&adv)?);
            pred.iter().zip(&targets).filter(|(p, t)| p == t).count()
        }
        TrainTarget::Embedding {
            model,
            references,
            threshold,
        } => {
            let Some(t) = threshold else {
                return Ok(None);
            };
            let d = loss::squared_distances(&model.infer(&adv)?, &references.select(&targets));
            d.iter().filter(|&&v| v < *t).count()
        }
    };
    Ok(Some(100.0 * hits as f64 / n.max(1) as f64))
}

/// Runs the training loop; the target model is only read.
pub fn train_generator(
    generator: &mut Generator<f32>,
    target: &TrainTarget<'_>,
    train_images: &Tensor<f32>,
    probe: Option<&Tensor<f32>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate(generator.config.num_classes)?;
    match (target, cfg.loss_kind) {
        (TrainTarget::Classifier(_), LossKind::CrossEntropy)
        | (TrainTarget::Embedding { .. }, LossKind::EmbeddingDistance) => {}
        _ => {
            return Err(Error::Config(vec![format!(
                "loss_kind {} does not match the target model type",
                cfg.loss_kind
            )]))
        }
    }
    generator.config.epsilon = cfg.epsilon;
    let probe = probe.map(|p| {
        let n = p.dim(0).min(cfg.probe_size);
        p.select(&(0..n).collect::<Vec<_>>())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, &generator.params());
    let mut log = TrainLog::default();
    let mut initial = None;
    let mut above = 0usize;
    for it in 0..cfg.max_iterations {
        let start = Instant::now();
        let (x, classes) = sample_training_batch(train_images, &cfg.conditional_classes, cfg.batch_size, &mut rng)?;
        let (out, tape) = generator.forward(&x, &classes, Phase::Train)?;
        let linf = out.delta.linf();
        if linf > cfg.epsilon + 1e-6 {
            return Err(Error::Numeric(format!(
                "perturbation {linf} exceeds budget {} at iteration {it}",
                cfg.epsilon
            )));
        }
        let (l, d_adv) = target_loss(target, &out.adversarial, &classes)?;
        let tail = |log: &TrainLog| {
            let l = log.losses();
            l[l.len().saturating_sub(20)..].to_vec()
        };
        if !l.is_finite() || !d_adv.all_finite() {
            return Err(Error::Training {
                message: format!("non-finite loss or gradient at iteration {it}"),
                loss_tail: tail(&log),
            });
        }
        let l0 = *initial.get_or_insert(l);
        above = if l > 10.0 * l0 { above + 1 } else { 0 };
        if above >= 100 {
            return Err(Error::Training {
                message: format!("loss above 10x its initial value for 100 iterations (iteration {it})"),
                loss_tail: tail(&log),
            });
        }
        let mut grads = generator.zero_grads();
        generator.backward(&tape, &d_adv, &mut grads);
        adam.lr = cosine_lr(
            cfg.learning_rate,
            it as f64 / cfg.max_iterations.saturating_sub(1).max(1) as f64,
            cfg.final_lr_fraction,
        );
        adam.step(&mut generator.params_mut(), &grads);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let measured = match &probe {
            Some(p) if cfg.probe_every > 0 && ((it + 1) % cfg.probe_every == 0 || it + 1 == cfg.max_iterations) => {
                probe_success(generator, target, p, &cfg.conditional_classes)?
            }
            _ => None,
        };
        log.records.push(IterationRecord {
            iteration: it,
            loss: l,
            probe_success: measured,
            ms,
        });
    }
    Ok(log)
}
