//! Measurement protocols: success and fooling rates, perturbation scaling, semantic-pattern
//! probes, timing, the targets-count and convergence studies, and face impersonation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Phase};
use crate::loss;
use crate::tensor::Tensor;
use crate::train::{train_generator, TrainConfig, TrainLog, TrainTarget};
use crate::zoo::{Classifier, EmbeddingModel};

/// Percentage of predictions equal to their target.
pub fn success_from_predictions(predictions: &[usize], targets: &[usize]) -> f64 {
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / predictions.len().max(1) as f64
}

/// Targeted success (%) of `adversarial` against `model`.
pub fn targeted_success_rate(adversarial: &Tensor<f32>, targets: &[usize], model: &Classifier) -> Result<f64> {
    if targets.len() != adversarial.dim(0) {
        return Err(Error::Input(format!(
            "{} targets for {} images",
            targets.len(),
            adversarial.dim(0)
        )));
    }
    Ok(success_from_predictions(&model.predict(adversarial)?.labels, targets))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoolingRatios {
    /// % of images whose prediction changed.
    pub untargeted: f64,
    /// % of adversarial images predicted as their target.
    pub targeted: f64,
    /// % of clean images already predicted as their target.
    pub clean_target_rate: f64,
}

pub fn fooling_ratios_from_predictions(
    clean: &[usize],
    adversarial: &[usize],
    targets: &[usize],
) -> Result<FoolingRatios> {
    if clean.len() != adversarial.len() || clean.len() != targets.len() {
        return Err(Error::Input(format!(
            "misaligned predictions: {} clean, {} adversarial, {} targets",
            clean.len(),
            adversarial.len(),
            targets.len()
        )));
    }
    let n = clean.len().max(1) as f64;
    let changed = clean.iter().zip(adversarial).filter(|(a, b)| a != b).count();
    Ok(FoolingRatios {
        untargeted: 100.0 * changed as f64 / n,
        targeted: success_from_predictions(adversarial, targets),
        clean_target_rate: success_from_predictions(clean, targets),
    })
}

pub fn fooling_ratios(
    clean: &Tensor<f32>,
    adversarial: &Tensor<f32>,
    targets: &[usize],
    model: &Classifier,
) -> Result<FoolingRatios> {
    if clean.shape() != adversarial.shape() {
        return Err(Error::Input("clean and adversarial batches differ in shape".into()));
    }
    fooling_ratios_from_predictions(
        &model.predict(clean)?.labels,
        &model.predict(adversarial)?.labels,
        targets,
    )
}

/// Affine map `δ ↦ (δ + ε) / 2ε` into `[0, 1]`.
pub fn scale_perturbation(delta: &Tensor<f32>, epsilon: f64) -> Result<Tensor<f32>> {
    let worst = delta.abs_max() as f64;
    if worst > epsilon + 1e-6 {
        return Err(Error::Input(format!(
            "perturbation magnitude {worst} exceeds epsilon {epsilon}"
        )));
    }
    let (e, inv) = (epsilon as f32, (0.5 / epsilon) as f32);
    Ok(delta.map(|v| ((v + e) * inv).clamp(0.0, 1.0)))
}

pub fn unscale_perturbation(scaled: &Tensor<f32>, epsilon: f64) -> Tensor<f32> {
    let e = epsilon as f32;
    scaled.map(|v| v * 2.0 * e - e)
}

/// Mean softmax probability of each row's target class.
pub fn mean_target_confidence(model: &Classifier, images: &Tensor<f32>, targets: &[usize]) -> Result<f64> {
    let p = model.predict(images)?.probabilities;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| p.item(i)[t] as f64)
        .sum::<f64>()
        / targets.len().max(1) as f64)
}

/// Mean target-class confidence of the scaled perturbations on each model.
pub fn semantic_pattern_confidence(
    deltas: &Tensor<f32>,
    epsilon: f64,
    targets: &[usize],
    models: &[&Classifier],
) -> Result<Vec<f64>> {
    let scaled = scale_perturbation(deltas, epsilon)?;
    models
        .iter()
        .map(|m| mean_target_confidence(m, &scaled, targets))
        .collect()
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-image PCC between the logits of each adversarial image and of its scaled perturbation.
pub fn logit_pcc(model: &Classifier, adversarial: &Tensor<f32>, scaled_delta: &Tensor<f32>) -> Result<Vec<f64>> {
    let la = model.logits(adversarial)?;
    let lp = model.logits(scaled_delta)?;
    (0..la.dim(0))
        .map(|i| {
            let a: Vec<f64> = la.item(i).iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = lp.item(i).iter().map(|&v| v as f64).collect();
            pearson(&a, &b).ok_or_else(|| Error::Numeric(format!("zero-variance logits for image {i}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub batch_size: usize,
    pub repetitions: usize,
    pub median_ms_per_image: f64,
    pub min_ms_per_image: f64,
}

/// Median wall clock per image of `f` after 5 warm-up calls.
pub fn timing_profile(batch_size: usize, repetitions: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..5 {
        f()?;
    }
    let reps = repetitions.max(20);
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3 / batch_size.max(1) as f64);
    }
    ms.sort_by(f64::total_cmp);
    Ok(Timing {
        batch_size,
        repetitions: reps,
        median_ms_per_image: ms[reps / 2],
        min_ms_per_image: ms[0],
    })
}

/// Cost model: instance-specific `(t_fp + t_bp)·M` against instance-agnostic `t_G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub classifier_forward_ms: f64,
    pub classifier_backward_ms: f64,
    pub generator_forward_ms: f64,
    pub steps: usize,
    pub predicted_instance_specific_ms: f64,
    pub predicted_speedup: f64,
}

/// Measures the per-image terms of the cost model on `x`.
pub fn cost_model(
    classifier: &Classifier,
    generator: &Generator<f32>,
    x: &Tensor<f32>,
    steps: usize,
    repetitions: usize,
) -> Result<CostModel> {
    let b = x.dim(0);
    let targets = vec![0usize; b];
    let fwd = timing_profile(b, repetitions, || classifier.net.forward(x).map(|_| ()))?;
    let both = timing_profile(b, repetitions, || {
        let (y, tape) = classifier.net.forward(x)?;
        let (_, d) = loss::cross_entropy(&y, &targets)?;
        classifier.net.input_grad(&tape, &d);
        Ok(())
    })?;
    let cond: Vec<usize> = (0..b).map(|i| i % generator.config.num_classes).collect();
    let gen = timing_profile(b, repetitions, || generator.generate(x, &cond, Phase::Eval).map(|_| ()))?;
    let t_fp = fwd.median_ms_per_image;
    let t_bp = (both.median_ms_per_image - t_fp).max(0.0);
    let predicted = (t_fp + t_bp) * steps as f64;
    Ok(CostModel {
        classifier_forward_ms: t_fp,
        classifier_backward_ms: t_bp,
        generator_forward_ms: gen.median_ms_per_image,
        steps,
        predicted_instance_specific_ms: predicted,
        predicted_speedup: predicted / gen.median_ms_per_image.max(1e-12),
    })
}

/// One row of an attack report: a (method, source, target model, target class) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub source_model: String,
    pub target_model: String,
    pub target_class: usize,
    pub success_rate: f64,
    pub untargeted_fooling: f64,
    pub clean_target_rate: f64,
    pub mean_target_confidence: f64,
    pub images: usize,
    pub clean_predictions: Vec<usize>,
    pub adversarial_predictions: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub epsilon: f64,
    pub seed: u64,
    pub dataset_size: usize,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    /// Mean ms per image for each method.
    pub timing: Vec<(String, f64)>,
}

impl AttackReport {
    /// Scores adversarial images crafted for one target class on every model.
    pub fn add_cell(
        &mut self,
        method: &str,
        source: &str,
        models: &[(&str, &Classifier)],
        clean: &Tensor<f32>,
        adversarial: &Tensor<f32>,
        target_class: usize,
    ) -> Result<()> {
        let targets = vec![target_class; clean.dim(0)];
        for (name, m) in models {
            let cp = m.predict(clean)?.labels;
            let ap = m.predict(adversarial)?;
            let fr = fooling_ratios_from_predictions(&cp, &ap.labels, &targets)?;
            let conf = (0..targets.len())
                .map(|i| ap.probabilities.item(i)[target_class] as f64)
                .sum::<f64>()
                / targets.len().max(1) as f64;
            self.rows.push(ReportRow {
                method: method.into(),
                source_model: source.into(),
                target_model: (*name).into(),
                target_class,
                success_rate: fr.targeted,
                untargeted_fooling: fr.untargeted,
                clean_target_rate: fr.clean_target_rate,
                mean_target_confidence: conf,
                images: targets.len(),
                clean_predictions: cp,
                adversarial_predictions: ap.labels,
            });
        }
        Ok(())
    }

    /// Mean success over target classes for each (method, target model), in first-seen order.
    pub fn transfer_matrix(&self) -> Vec<(String, String, f64)> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.method.clone(), r.target_model.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(m, t)| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.target_model == t)
                    .map(|r| r.success_rate)
                    .collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (m, t, mean)
            })
            .collect()
    }

    pub fn mean_success(&self, method: &str, target_model: &str) -> Option<f64> {
        self.transfer_matrix()
            .into_iter()
            .find(|(m, t, _)| m == method && t == target_model)
            .map(|(_, _, v)| v)
    }

    /// One row per cell, without the raw predictions.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "method",
            "source_model",
            "target_model",
            "target_class",
            "success_rate",
            "untargeted_fooling",
            "clean_target_rate",
            "mean_target_confidence",
            "images",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.method.clone(),
                r.source_model.clone(),
                r.target_model.clone(),
                r.target_class.to_string(),
                format!("{:.4}", r.success_rate),
                format!("{:.4}", r.untargeted_fooling),
                format!("{:.4}", r.clean_target_rate),
                format!("{:.6}", r.mean_target_confidence),
                r.images.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    /// Transfer matrix: one row per (method, target model), success averaged over classes.
    pub fn write_matrix_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "target_model", "mean_success_rate"])?;
        for (m, t, v) in self.transfer_matrix() {
            out.write_record([m, t, format!("{v:.4}")])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        self.write_csv(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?)?;
        let m = dir.join(format!("{stem}_matrix.csv"));
        self.write_matrix_csv(std::fs::File::create(&m).map_err(|e| Error::io(&m, e))?)
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(x), &ranks(y))
}

/// Shared inputs of the generator studies.
pub struct StudySetup<'a> {
    pub source: &'a Classifier,
    pub black_box: Vec<&'a Classifier>,
    pub train_images: &'a Tensor<f32>,
    pub eval_images: &'a Tensor<f32>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub classes: Vec<usize>,
    pub log: TrainLog,
    pub final_loss: f64,
    pub white_box: f64,
    /// Mean over black-box models.
    pub transfer: f64,
}

impl StudySetup<'_> {
    /// Trains a generator on `classes` and scores it with each eval image targeted at
    /// `classes[i % len]`.
    pub fn run(&self, classes: &[usize]) -> Result<(StudyRun, Generator<f32>)> {
        let mut cfg = self.train.clone();
        cfg.conditional_classes = classes.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen = Generator::new(self.generator.clone(), &mut rng)?;
        let log = train_generator(
            &mut gen,
            &TrainTarget::Classifier(&self.source.net),
            self.train_images,
            None,
            &cfg,
        )?;
        let n = self.eval_images.dim(0);
        let targets: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
        let adv = gen.generate(self.eval_images, &targets, Phase::Eval)?.adversarial;
        let white_box = targeted_success_rate(&adv, &targets, self.source)?;
        let transfer = self
            .black_box
            .iter()
            .map(|m| targeted_success_rate(&adv, &targets, m))
            .collect::<Result<Vec<_>>>()?;
        let transfer = transfer.iter().sum::<f64>() / transfer.len().max(1) as f64;
        let final_loss = log.trailing_mean(100);
        Ok((
            StudyRun {
                classes: classes.to_vec(),
                log,
                final_loss,
                white_box,
                transfer,
            },
            gen,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPoint {
    pub count: usize,
    pub white_box: f64,
    pub transfer: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountCurve {
    pub points: Vec<CountPoint>,
    /// Spearman correlation of count against mean of white-box and transfer success.
    pub spearman: Option<f64>,
}

/// One generator per count, trained on the first `count` entries of `class_order`.
pub fn targets_count_study(setup: &StudySetup<'_>, counts: &[usize], class_order: &[usize]) -> Result<CountCurve> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("counts must be strictly ascending".into()));
    }
    if counts.last().is_some_and(|&c| c > class_order.len()) || counts.first() == Some(&0) {
        return Err(Error::Parameter(format!(
            "counts must lie in [1, {}]",
            class_order.len()
        )));
    }
    let mut points = Vec::new();
    for &c in counts {
        let (run, _) = setup.run(&class_order[..c])?;
        points.push(CountPoint {
            count: c,
            white_box: run.white_box,
            transfer: run.transfer,
            final_loss: run.final_loss,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.count as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| 0.5 * (p.white_box + p.transfer)).collect();
    Ok(CountCurve {
        spearman: spearman(&x, &y),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub diverse: StudyRun,
    pub close: StudyRun,
}

/// Paired training on a diverse and a close subset of equal size.
pub fn convergence_study(setup: &StudySetup<'_>, diverse: &[usize], close: &[usize]) -> Result<ConvergenceResult> {
    if diverse.len() != close.len() {
        return Err(Error::Parameter(format!(
            "subset sizes differ: {} vs {}",
            diverse.len(),
            close.len()
        )));
    }
    Ok(ConvergenceResult {
        diverse: setup.run(diverse)?.0,
        close: setup.run(close)?.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// One target identity.
    I,
    /// Every listed target identity.
    II,
}

/// Sources, reference images and target identities for impersonation.
pub struct FaceSetup<'a> {
    /// Source faces, none belonging to a target identity.
    pub sources: &'a Tensor<f32>,
    /// `[num_ids, C, H, W]`, the fixed reference image of each identity.
    pub references: &'a Tensor<f32>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRow {
    pub model: usize,
    pub target: usize,
    pub success_rate: f64,
}

/// Impersonation success per (model, target identity): squared distance to the target's
/// reference embedding below the model's threshold.
pub fn face_protocol(
    mut attack: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    models: &[&EmbeddingModel],
    setup: &FaceSetup<'_>,
    protocol: Protocol,
) -> Result<Vec<FaceRow>> {
    let thresholds = models.iter().map(|m| m.threshold()).collect::<Result<Vec<_>>>()?;
    let targets: &[usize] = match protocol {
        Protocol::I => &setup.targets[..setup.targets.len().min(1)],
        Protocol::II => &setup.targets,
    };
    let n = setup.sources.dim(0);
    let mut rows = Vec::new();
    for &t in targets {
        let adv = attack(setup.sources, t)?;
        let reference = setup.references.select(&vec![t; n]);
        for (mi, m) in models.iter().enumerate() {
            let d = loss::squared_distances(&m.embed(&adv)?, &m.embed(&reference)?);
            let hits = d.iter().filter(|&&v| v < thresholds[mi]).count();
            rows.push(FaceRow {
                model: mi,
                target: t,
                success_rate: 100.0 * hits as f64 / n.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// Mean success for one model over a protocol's rows.
pub fn face_mean(rows: &[FaceRow], model: usize) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.model == model)
        .map(|r| r.success_rate)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean target confidence of random sign-noise patterns scaled like perturbations.
pub fn random_pattern_confidence(model: &Classifier, shape: &[usize], targets: &[usize], seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0f32 } else { 0.0 });
    mean_target_confidence(model, &noise, targets)
}
