//! Reproducible experiment runs driven by TOML configuration files.
//!
//! A config file may pull in others with `include = ["base.toml", ...]` (paths relative to
//! the including file). Included tables are merged first; keys in the including file win.
//!
//! Every run gets its own directory `<out_dir>/<kind>-s<seed>-<unix time>/`:
//!
//! ```text
//! run.json        config hash, merged config, status
//! FAILED.json     present only if the run stopped with an error
//! checkpoints/    models and generators
//! reports/        CSV and JSON results
//! figures/        PNG exports
//! logs/           training logs (CSV)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{run_iterative_attack, run_iterative_attack_chunked, IterAttackConfig, Method, Objective};
use crate::data::{load_labeled_dir, synth_faces, synth_textures, write_png, LabeledImages};
use crate::error::{Error, Result};
use crate::eval::{self, AttackReport, FaceSetup, Protocol, ReportMeta, StudySetup};
use crate::generator::{Generator, GeneratorConfig, Phase};
use crate::partition::{closest_subset, hierarchical_partition, subset_diversity_score, Bandwidth, PartitionFile};
use crate::tensor::Tensor;
use crate::train::{train_generator, LossKind, TrainConfig, TrainTarget};
use crate::zoo::{
    train_embedding_model, train_toy_classifier, verification_pairs, Arch, Classifier, ClassifierTrainConfig,
    EmbeddingModel, EmbeddingTrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Partition,
    Attack,
    Evaluate,
    StudyTargets,
    StudyConvergence,
    Face,
    Table1Toy,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Partition => "partition",
            Self::Attack => "attack",
            Self::Evaluate => "evaluate",
            Self::StudyTargets => "study-targets",
            Self::StudyConvergence => "study-convergence",
            Self::Face => "face",
            Self::Table1Toy => "table1-toy",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    /// Seed of the procedural image world; independent of the run seed.
    pub seed: u64,
    /// Labelled PNG directories (`<dir>/<class>/*.png`) replacing the procedural data.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_size: 4000,
            test_size: 1000,
            image_size: 32,
            seed: 1,
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSection {
    pub source: Arch,
    pub black_box: Vec<Arch>,
    pub training: ClassifierTrainConfig,
    /// Existing checkpoints by architecture tag; other architectures are trained.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for ZooSection {
    fn default() -> Self {
        Self {
            source: Arch::Wide,
            black_box: vec![Arch::Plain, Arch::Residual],
            training: ClassifierTrainConfig {
                epochs: 16,
                ..ClassifierTrainConfig::default()
            },
            checkpoints: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub methods: Vec<Method>,
    pub steps: Option<usize>,
    pub chunk: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Mim, Method::Dim],
            steps: None,
            chunk: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub target_classes: Vec<usize>,
    pub images: usize,
    /// Adversarial examples and scaled patterns exported per method.
    pub export: usize,
    /// Existing generator checkpoint for `evaluate`.
    pub generator_checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            target_classes: vec![0, 3, 6, 8],
            images: 512,
            export: 8,
            generator_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub k: usize,
    pub bandwidth: String,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            k: 4,
            bandwidth: "auto".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            counts: vec![1, 4, 10],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaceSection {
    pub identities: usize,
    /// Identities `0..train_identities` train the embedding models.
    pub train_identities: usize,
    pub per_identity: usize,
    pub white_box: Arch,
    pub black_box: Arch,
    pub embedding: EmbeddingTrainConfig,
    /// Generator architecture for impersonation; `epsilon` and `num_classes` are filled in.
    pub generator: GeneratorConfig,
    /// Protocol I uses the first target; Protocol II uses all of them.
    pub targets: Vec<usize>,
    pub sources: usize,
}

impl Default for FaceSection {
    fn default() -> Self {
        Self {
            identities: 160,
            train_identities: 120,
            per_identity: 12,
            white_box: Arch::Wide,
            black_box: Arch::Plain,
            embedding: EmbeddingTrainConfig {
                steps: 2000,
                ..EmbeddingTrainConfig::default()
            },
            generator: GeneratorConfig {
                base_channels: 16,
                residual_blocks: 2,
                kernel_sigma: 1.0,
                ..GeneratorConfig::default()
            },
            targets: vec![120, 128, 136, 144, 152],
            sources: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: Option<u64>,
    pub epsilon: f64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub zoo: ZooSection,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub partition: PartitionSection,
    pub study: StudySection,
    pub face: FaceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Table1Toy,
            seed: None,
            epsilon: 16.0 / 255.0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            zoo: ZooSection::default(),
            generator: toy_generator_config(),
            train: toy_train_config(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            partition: PartitionSection::default(),
            study: StudySection::default(),
            face: FaceSection::default(),
        }
    }
}

/// Generator size used by the toy recipes (smaller than the library default).
pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 8,
        residual_blocks: 2,
        kernel_sigma: 0.5,
        ..GeneratorConfig::default()
    }
}

/// Training settings used by the toy recipes.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        final_lr_fraction: 0.05,
        ..TrainConfig::default()
    }
}

/// A merged, parsed config plus the canonical text it was parsed from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub canonical: String,
    pub hash: String,
    pub base_dir: PathBuf,
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > 8 {
        return Err(Error::Config(vec![format!(
            "include depth exceeded at {}",
            path.display()
        )]));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(vec![format!(
                    "include entries must be strings, got {other}"
                )])),
            })
            .collect::<Result<_>>()?,
        Some(toml::Value::String(s)) => vec![s],
        Some(other) => {
            return Err(Error::Config(vec![format!(
                "include must be a list of paths, got {other}"
            )]))
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

/// Parses TOML text (no includes) into a config.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(vec![format!("{e}")]))?;
    from_table(table, PathBuf::from("."))
}

fn from_table(table: toml::Table, base_dir: PathBuf) -> Result<LoadedConfig> {
    let canonical = toml::to_string(&table).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let hash = Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(LoadedConfig {
        config,
        canonical,
        hash,
        base_dir,
    })
}

/// Reads a config file and its includes.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let table = load_table(path, 0)?;
    from_table(table, path.parent().unwrap_or(Path::new(".")).to_path_buf())
}

impl LoadedConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Every problem with the config; empty means valid.
pub fn validate_config(loaded: &LoadedConfig) -> Vec<String> {
    let c = &loaded.config;
    let mut errs = Vec::new();
    if c.seed.is_none() {
        errs.push("seed: must be set explicitly".into());
    }
    if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
        errs.push(format!("epsilon: must lie in (0, 1), got {}", c.epsilon));
    }
    let k = c.data.num_classes;
    if k < 2 {
        errs.push(format!("data.num_classes: need at least 2 classes, got {k}"));
    }
    if c.data.image_size % 4 != 0 || c.data.image_size == 0 {
        errs.push(format!(
            "data.image_size: must be a positive multiple of 4, got {}",
            c.data.image_size
        ));
    }
    for (name, p) in [
        ("data.train_dir", &c.data.train_dir),
        ("data.test_dir", &c.data.test_dir),
    ] {
        if let Some(p) = p {
            if !loaded.resolve(p).is_dir() {
                errs.push(format!("{name}: {} does not exist", p.display()));
            }
        }
    }
    if c.data.train_dir.is_some() != c.data.test_dir.is_some() {
        errs.push("data.train_dir / data.test_dir: give both or neither".into());
    }
    for (tag, p) in &c.zoo.checkpoints {
        if Arch::from_str(tag).is_err() {
            errs.push(format!("zoo.checkpoints.{tag}: unknown architecture"));
        }
        if !loaded.resolve(p).is_file() {
            errs.push(format!("zoo.checkpoints.{tag}: {} does not exist", p.display()));
        }
    }
    if let Some(p) = &c.eval.generator_checkpoint {
        if !loaded.resolve(p).is_file() {
            errs.push(format!("eval.generator_checkpoint: {} does not exist", p.display()));
        }
    }
    if c.kind == ExperimentKind::Evaluate && c.eval.generator_checkpoint.is_none() {
        errs.push("eval.generator_checkpoint: required for kind = \"evaluate\"".into());
    }
    if c.eval.target_classes.is_empty() {
        errs.push("eval.target_classes: must not be empty".into());
    }
    for &t in &c.eval.target_classes {
        if t >= k {
            errs.push(format!(
                "eval.target_classes: class {t} outside the model's {k} classes"
            ));
        }
    }
    for &t in &c.train.conditional_classes {
        if t >= k {
            errs.push(format!(
                "train.conditional_classes: class {t} outside the model's {k} classes"
            ));
        }
    }
    if c.eval.images == 0 {
        errs.push("eval.images: must be positive".into());
    }
    if c.partition.k == 0 || c.partition.k > k {
        errs.push(format!("partition.k: must lie in [1, {k}], got {}", c.partition.k));
    }
    if c.partition.bandwidth.parse::<Bandwidth>().is_err() {
        errs.push(format!(
            "partition.bandwidth: expected \"auto\" or a positive number, got {:?}",
            c.partition.bandwidth
        ));
    }
    if let Some(0) = c.attack.steps {
        errs.push("attack.steps: must be at least 1".into());
    }
    if c.train.batch_size == 0 {
        errs.push("train.batch_size: must be positive".into());
    }
    if !(c.train.learning_rate > 0.0) {
        errs.push(format!(
            "train.learning_rate: must be positive, got {}",
            c.train.learning_rate
        ));
    }
    if let Err(e) = c.generator.validate() {
        errs.push(format!("generator: {e}"));
    }
    if c.study.counts.is_empty() || c.study.counts.windows(2).any(|w| w[0] >= w[1]) {
        errs.push("study.counts: must be non-empty and strictly ascending".into());
    }
    if c.study.counts.iter().any(|&n| n == 0 || n > k) {
        errs.push(format!("study.counts: counts must lie in [1, {k}]"));
    }
    let f = &c.face;
    if f.train_identities < 2 || f.train_identities >= f.identities {
        errs.push("face.train_identities: must be at least 2 and below face.identities".into());
    }
    if f.targets.iter().any(|&t| t < f.train_identities || t >= f.identities) {
        errs.push("face.targets: target identities must be held-out identities".into());
    }
    if f.targets.is_empty() {
        errs.push("face.targets: need at least one target identity".into());
    }
    let face_gen = GeneratorConfig {
        num_classes: f.identities,
        ..f.generator.clone()
    };
    if let Err(e) = face_gen.validate() {
        errs.push(format!("face.generator: {e}"));
    }
    if f.per_identity < 2 {
        errs.push("face.per_identity: need at least 2 images per identity".into());
    }
    errs
}

/// Data and models shared by the classifier recipes.
pub struct ClassifierWorld {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub source: Classifier,
    pub black_box: Vec<Classifier>,
}

impl ClassifierWorld {
    pub fn all_models(&self) -> Vec<(&str, &Classifier)> {
        std::iter::once(&self.source)
            .chain(&self.black_box)
            .map(|m| (m.arch().tag(), m))
            .collect()
    }

    pub fn eval_images(&self, n: usize) -> Tensor<f32> {
        self.test
            .images
            .select(&(0..n.min(self.test.len())).collect::<Vec<_>>())
    }
}

fn load_data(loaded: &LoadedConfig) -> Result<(LabeledImages, LabeledImages)> {
    let d = &loaded.config.data;
    match (&d.train_dir, &d.test_dir) {
        (Some(a), Some(b)) => Ok((
            load_labeled_dir(&loaded.resolve(a))?,
            load_labeled_dir(&loaded.resolve(b))?,
        )),
        _ => Ok((
            synth_textures(d.num_classes, d.train_size, d.image_size, d.seed),
            synth_textures(d.num_classes, d.test_size, d.image_size, d.seed.wrapping_add(1)),
        )),
    }
}

fn classifier_for(
    loaded: &LoadedConfig,
    arch: Arch,
    seed: u64,
    train: &LabeledImages,
    test: &LabeledImages,
    run: Option<&RunDir>,
) -> Result<Classifier> {
    if let Some(p) = loaded.config.zoo.checkpoints.get(arch.tag()) {
        let m = Classifier::load(&loaded.resolve(p))?;
        if m.arch() != arch {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, not {arch}",
                p.display(),
                m.arch()
            )));
        }
        return Ok(m);
    }
    let m = train_toy_classifier(train, test, arch, seed, &loaded.config.zoo.training)?;
    if let Some(r) = run {
        m.save(&r.path("checkpoints", &format!("classifier_{arch}.ckpt")))?;
    }
    Ok(m)
}

/// Loads data and trains (or loads) the source and black-box classifiers.
pub fn build_classifier_world(loaded: &LoadedConfig, seed: u64, run: Option<&RunDir>) -> Result<ClassifierWorld> {
    let (train, test) = load_data(loaded)?;
    let z = &loaded.config.zoo;
    // distinct model seeds per architecture slot
    let source = classifier_for(
        loaded,
        z.source,
        seed.wrapping_mul(31).wrapping_add(1),
        &train,
        &test,
        run,
    )?;
    let black_box = z
        .black_box
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            classifier_for(
                loaded,
                a,
                seed.wrapping_mul(31).wrapping_add(2 + i as u64),
                &train,
                &test,
                run,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierWorld {
        train,
        test,
        source,
        black_box,
    })
}

/// Output directory of one run.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(parent: &Path, kind: ExperimentKind, seed: u64) -> Result<Self> {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut root = parent.join(format!("{kind}-s{seed}-{stamp}"));
        let mut n = 1;
        while root.exists() {
            root = parent.join(format!("{kind}-s{seed}-{stamp}-{n}"));
            n += 1;
        }
        for sub in ["checkpoints", "reports", "figures", "logs"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    fn write_json(&self, sub: &str, name: &str, value: &impl Serialize) -> Result<()> {
        let p = self.path(sub, name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&p, e))
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub config_hash: String,
    /// Headline numbers of the recipe, for logs and tests.
    pub metrics: BTreeMap<String, f64>,
}

/// Validates, creates the run directory and executes the recipe.
///
/// Validation failures return [`Error::Config`] before anything is written. Failures after
/// that leave `FAILED.json` in the run directory.
pub fn run_experiment(loaded: &LoadedConfig) -> Result<RunOutcome> {
    let errs = validate_config(loaded);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let c = &loaded.config;
    let seed = c.seed.expect("validated");
    let out = loaded.resolve(&c.out_dir);
    let run = RunDir::create(&out, c.kind, seed)?;
    let mut status = serde_json::json!({
        "kind": c.kind,
        "seed": seed,
        "config_hash": loaded.hash,
        "config": loaded.canonical,
        "status": "running",
    });
    run.write_json("", "run.json", &status)?;
    match execute(loaded, seed, &run) {
        Ok(metrics) => {
            status["status"] = "ok".into();
            status["metrics"] = serde_json::to_value(&metrics)?;
            run.write_json("", "run.json", &status)?;
            Ok(RunOutcome {
                run_dir: run.root,
                config_hash: loaded.hash.clone(),
                metrics,
            })
        }
        Err(e) => {
            let marker = serde_json::json!({
                "error": e.to_string(),
                "config_hash": loaded.hash,
                "loss_tail": match &e { Error::Training { loss_tail, .. } => loss_tail.clone(), _ => Vec::new() },
            });
            // the original error matters more than a failure to record it
            let _ = run.write_json("", "FAILED.json", &marker);
            status["status"] = "failed".into();
            let _ = run.write_json("", "run.json", &status);
            Err(e)
        }
    }
}

fn execute(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    match loaded.config.kind {
        ExperimentKind::Partition => recipe_partition(loaded, seed, run),
        ExperimentKind::Train => recipe_train(loaded, seed, run),
        ExperimentKind::Attack => recipe_table1(loaded, seed, run, false),
        ExperimentKind::Evaluate | ExperimentKind::Table1Toy => recipe_table1(loaded, seed, run, true),
        ExperimentKind::StudyTargets => recipe_targets(loaded, seed, run),
        ExperimentKind::StudyConvergence => recipe_convergence(loaded, seed, run),
        ExperimentKind::Face => recipe_face(loaded, seed, run),
    }
}

fn train_cfg(c: &ExperimentConfig, classes: &[usize], seed: u64) -> TrainConfig {
    let mut t = c.train.clone();
    t.epsilon = c.epsilon;
    t.seed = seed;
    if t.conditional_classes.is_empty() {
        t.conditional_classes = classes.to_vec();
    }
    t
}

fn gen_cfg(c: &ExperimentConfig, num_classes: usize) -> GeneratorConfig {
    GeneratorConfig {
        epsilon: c.epsilon,
        num_classes,
        ..c.generator.clone()
    }
}

/// Trains a generator against the world's source classifier.
pub fn train_source_generator(
    c: &ExperimentConfig,
    world: &ClassifierWorld,
    classes: &[usize],
    seed: u64,
) -> Result<(Generator<f32>, crate::train::TrainLog)> {
    let cfg = train_cfg(c, classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Generator::new(gen_cfg(c, world.train.num_classes), &mut rng)?;
    let probe = world.eval_images(cfg.probe_size);
    let log = train_generator(
        &mut g,
        &TrainTarget::Classifier(&world.source.net),
        &world.train.images,
        Some(&probe),
        &cfg,
    )?;
    Ok((g, log))
}

fn export_pngs(run: &RunDir, stem: &str, images: &Tensor<f32>, n: usize) -> Result<()> {
    let (c, h, w) = (images.dim(1), images.dim(2), images.dim(3));
    for i in 0..n.min(images.dim(0)) {
        write_png(
            &run.path("figures", &format!("{stem}_{i:02}.png")),
            images.item(i),
            c,
            h,
            w,
        )?;
    }
    Ok(())
}

/// Multi-target transfer table: generator (optional) and iterative baselines, each target
/// class applied to every eval image, scored on every model.
pub fn transfer_report(
    c: &ExperimentConfig,
    world: &ClassifierWorld,
    generator: Option<&Generator<f32>>,
    seed: u64,
    mut export: impl FnMut(&str, usize, &Tensor<f32>, &Tensor<f32>) -> Result<()>,
) -> Result<AttackReport> {
    let x = world.eval_images(c.eval.images);
    let n = x.dim(0);
    let models = world.all_models();
    let source = world.source.arch().tag();
    let mut report = AttackReport {
        meta: ReportMeta {
            epsilon: c.epsilon,
            seed,
            dataset_size: n,
            config_hash: String::new(),
        },
        ..AttackReport::default()
    };
    if let Some(g) = generator {
        let mut total_ms = 0.0;
        for &t in &c.eval.target_classes {
            let start = std::time::Instant::now();
            let out = g.generate(&x, &vec![t; n], Phase::Eval)?;
            total_ms += start.elapsed().as_secs_f64() * 1e3;
            export("generator", t, &out.adversarial, &out.delta.values)?;
            report.add_cell("generator", source, &models, &x, &out.adversarial, t)?;
        }
        report.timing.push((
            "generator".into(),
            total_ms / (n * c.eval.target_classes.len()).max(1) as f64,
        ));
    }
    for &method in &c.attack.methods {
        let cfg = IterAttackConfig::preset(method, c.epsilon, c.attack.steps, seed);
        let mut total_ms = 0.0;
        for &t in &c.eval.target_classes {
            let start = std::time::Instant::now();
            let adv = run_iterative_attack_chunked(&x, &vec![t; n], &world.source.net, &cfg, c.attack.chunk)?;
            total_ms += start.elapsed().as_secs_f64() * 1e3;
            let delta = adv.zip_map(&x, |a, b| a - b);
            export(method.tag(), t, &adv, &delta)?;
            report.add_cell(method.tag(), source, &models, &x, &adv, t)?;
        }
        report.timing.push((
            method.tag().into(),
            total_ms / (n * c.eval.target_classes.len()).max(1) as f64,
        ));
    }
    Ok(report)
}

fn recipe_table1(
    loaded: &LoadedConfig,
    seed: u64,
    run: &RunDir,
    with_generator: bool,
) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let world = build_classifier_world(loaded, seed, Some(run))?;
    let generator = if !with_generator {
        None
    } else if let Some(p) = &c.eval.generator_checkpoint {
        Some(Generator::load(&loaded.resolve(p))?)
    } else {
        let (g, log) = train_source_generator(c, &world, &c.eval.target_classes, seed)?;
        log.save_csv(&run.path("logs", "generator_train.csv"))?;
        g.save(&run.path("checkpoints", "generator.ckpt"))?;
        Some(g)
    };
    let eps = c.epsilon;
    let export_n = c.eval.export;
    let mut report = transfer_report(c, &world, generator.as_ref(), seed, |method, t, adv, delta| {
        if export_n == 0 {
            return Ok(());
        }
        export_pngs(run, &format!("{method}_t{t}_adv"), adv, export_n)?;
        let scaled = eval::scale_perturbation(delta, eps)?;
        export_pngs(run, &format!("{method}_t{t}_pattern"), &scaled, export_n)
    })?;
    report.meta.config_hash = loaded.hash.clone();
    report.save(&run.root.join("reports"), "transfer")?;
    let mut metrics = BTreeMap::new();
    for (m, t, v) in report.transfer_matrix() {
        metrics.insert(format!("{m}/{t}"), v);
    }
    Ok(metrics)
}

fn recipe_train(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let world = build_classifier_world(loaded, seed, Some(run))?;
    let (g, log) = train_source_generator(c, &world, &c.eval.target_classes, seed)?;
    log.save_csv(&run.path("logs", "generator_train.csv"))?;
    g.save(&run.path("checkpoints", "generator.ckpt"))?;
    let mut m = BTreeMap::new();
    m.insert("final_loss".into(), log.trailing_mean(100));
    if let Some(p) = log.records.iter().rev().find_map(|r| r.probe_success) {
        m.insert("probe_success".into(), p);
    }
    Ok(m)
}

fn recipe_partition(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let world = build_classifier_world(loaded, seed, Some(run))?;
    let space = world.source.class_space()?;
    let bw: Bandwidth = c.partition.bandwidth.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (partition, sigma) = hierarchical_partition(&space, c.partition.k, bw, &mut rng)?;
    PartitionFile::new(&partition, seed, sigma, bw).save(&run.path("reports", "partition.json"))?;
    let close = closest_subset(&space, c.partition.k)?;
    let mut m = BTreeMap::new();
    m.insert("bandwidth".into(), sigma);
    m.insert(
        "diverse_score".into(),
        subset_diversity_score(&partition.subsets[0], &space)?,
    );
    m.insert("close_score".into(), subset_diversity_score(&close, &space)?);
    run.write_json("reports", "closest_subset.json", &close)?;
    Ok(m)
}

fn study_setup<'a>(
    c: &ExperimentConfig,
    world: &'a ClassifierWorld,
    eval: &'a Tensor<f32>,
    seed: u64,
) -> StudySetup<'a> {
    StudySetup {
        source: &world.source,
        black_box: world.black_box.iter().collect(),
        train_images: &world.train.images,
        eval_images: eval,
        generator: gen_cfg(c, world.train.num_classes),
        train: train_cfg(c, &[], seed),
    }
}

fn recipe_targets(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let world = build_classifier_world(loaded, seed, Some(run))?;
    let eval = world.eval_images(c.eval.images);
    let order: Vec<usize> = (0..world.train.num_classes).collect();
    let mut metrics = BTreeMap::new();
    let mut curves = Vec::new();
    for &s in &c.study.seeds {
        let setup = study_setup(c, &world, &eval, seed.wrapping_add(s));
        let curve = eval::targets_count_study(&setup, &c.study.counts, &order)?;
        if let Some(r) = curve.spearman {
            metrics.insert(format!("spearman/s{s}"), r);
        }
        curves.push(curve);
    }
    let mut w = csv::Writer::from_path(run.path("reports", "targets_curve.csv"))?;
    w.write_record(["seed", "count", "white_box", "transfer", "final_loss"])?;
    for (s, curve) in c.study.seeds.iter().zip(&curves) {
        for p in &curve.points {
            w.write_record([
                s.to_string(),
                p.count.to_string(),
                format!("{:.4}", p.white_box),
                format!("{:.4}", p.transfer),
                format!("{:.6}", p.final_loss),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    run.write_json("reports", "targets_curve.json", &curves)?;
    Ok(metrics)
}

fn recipe_convergence(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let world = build_classifier_world(loaded, seed, Some(run))?;
    let eval = world.eval_images(c.eval.images);
    let space = world.source.class_space()?;
    let bw: Bandwidth = c.partition.bandwidth.parse()?;
    let mut metrics = BTreeMap::new();
    let mut results = Vec::new();
    for &s in &c.study.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let (partition, _) = hierarchical_partition(&space, c.partition.k, bw, &mut rng)?;
        let diverse = partition.subsets[0].clone();
        let close = closest_subset(&space, c.partition.k)?;
        let setup = study_setup(c, &world, &eval, seed.wrapping_add(s));
        let r = eval::convergence_study(&setup, &diverse, &close)?;
        r.diverse
            .log
            .save_csv(&run.path("logs", &format!("diverse_s{s}.csv")))?;
        r.close.log.save_csv(&run.path("logs", &format!("close_s{s}.csv")))?;
        metrics.insert(format!("diverse_loss/s{s}"), r.diverse.final_loss);
        metrics.insert(format!("close_loss/s{s}"), r.close.final_loss);
        metrics.insert(format!("diverse_transfer/s{s}"), r.diverse.transfer);
        metrics.insert(format!("close_transfer/s{s}"), r.close.transfer);
        results.push(r);
    }
    run.write_json("reports", "convergence.json", &results)?;
    Ok(metrics)
}

/// Toy face world: identity-labelled images, two calibrated embedding models, references.
pub struct FaceWorld {
    pub train: LabeledImages,
    pub held_out: LabeledImages,
    pub white_box: EmbeddingModel,
    pub black_box: EmbeddingModel,
    /// One reference image per identity, `[identities, C, H, W]`.
    pub references: Tensor<f32>,
}

/// Face images: training identities, held-out identities and one reference image per identity.
pub fn face_data(f: &FaceSection, size: usize, world_seed: u64) -> (LabeledImages, LabeledImages, Tensor<f32>) {
    let train = synth_faces(
        0..f.train_identities,
        f.per_identity,
        size,
        world_seed,
        world_seed ^ 0x11,
    );
    let held_out = synth_faces(
        f.train_identities..f.identities,
        f.per_identity,
        size,
        world_seed,
        world_seed ^ 0x22,
    );
    let refs = synth_faces(0..f.identities, 1, size, world_seed, world_seed ^ 0x33);
    (train, held_out, refs.images)
}

/// Builds the face world: identities below `train_identities` train the models; the rest
/// calibrate thresholds and serve as impersonation targets and sources. Each model's
/// held-out verification accuracy is stored as its `test_accuracy`.
pub fn build_face_world(f: &FaceSection, size: usize, world_seed: u64, seed: u64) -> Result<FaceWorld> {
    let (train, held_out, references) = face_data(f, size, world_seed);
    let mut white_box =
        train_embedding_model(&train, f.white_box, seed.wrapping_mul(31).wrapping_add(7), &f.embedding)?;
    let mut black_box =
        train_embedding_model(&train, f.black_box, seed.wrapping_mul(31).wrapping_add(8), &f.embedding)?;
    let (a, b, same) = verification_pairs(&held_out, seed);
    let xa = held_out.images.select(&a);
    let xb = held_out.images.select(&b);
    white_box.meta.test_accuracy = white_box.calibrate(&xa, &xb, &same)?;
    black_box.meta.test_accuracy = black_box.calibrate(&xa, &xb, &same)?;
    Ok(FaceWorld {
        train,
        held_out,
        white_box,
        black_box,
        references,
    })
}

impl FaceWorld {
    /// Held-out images whose identity is not among `targets`, up to `n`.
    pub fn sources(&self, targets: &[usize], n: usize) -> Tensor<f32> {
        let idx: Vec<usize> = (0..self.held_out.len())
            .filter(|&i| !targets.contains(&self.held_out.labels[i]))
            .take(n)
            .collect();
        self.held_out.images.select(&idx)
    }

    /// Reference embeddings of every identity under `model`.
    pub fn reference_embeddings(&self, model: &EmbeddingModel) -> Result<Tensor<f32>> {
        model.embed(&self.references)
    }
}

/// Trains an impersonation generator against the white-box embedding model.
pub fn train_face_generator(
    c: &ExperimentConfig,
    world: &FaceWorld,
    targets: &[usize],
    seed: u64,
) -> Result<(Generator<f32>, crate::train::TrainLog)> {
    let mut cfg = train_cfg(c, targets, seed);
    cfg.conditional_classes = targets.to_vec();
    cfg.loss_kind = LossKind::EmbeddingDistance;
    let refs = world.reference_embeddings(&world.white_box)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gcfg = GeneratorConfig {
        epsilon: c.epsilon,
        num_classes: c.face.identities,
        ..c.face.generator.clone()
    };
    let mut g = Generator::new(gcfg, &mut rng)?;
    let train_images = &world.train.images;
    let log = train_generator(
        &mut g,
        &TrainTarget::Embedding {
            model: &world.white_box.net,
            references: &refs,
            threshold: world.white_box.threshold,
        },
        train_images,
        None,
        &cfg,
    )?;
    Ok((g, log))
}

fn recipe_face(loaded: &LoadedConfig, seed: u64, run: &RunDir) -> Result<BTreeMap<String, f64>> {
    let c = &loaded.config;
    let f = &c.face;
    let world = build_face_world(f, c.data.image_size, c.data.seed, seed)?;
    world
        .white_box
        .save(&run.path("checkpoints", "embedding_white_box.ckpt"))?;
    world
        .black_box
        .save(&run.path("checkpoints", "embedding_black_box.ckpt"))?;
    let sources = world.sources(&f.targets, f.sources);
    let setup = FaceSetup {
        sources: &sources,
        references: &world.references,
        targets: f.targets.clone(),
    };
    let models = [&world.white_box, &world.black_box];
    let ref_emb = world.reference_embeddings(&world.white_box)?;
    let mim = IterAttackConfig {
        loss: crate::attacks::AttackLoss::EmbeddingDistance,
        ..IterAttackConfig::preset(Method::Mim, c.epsilon, c.attack.steps, seed)
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("calibration_white_box".into(), world.white_box.meta.test_accuracy);
    metrics.insert("calibration_black_box".into(), world.black_box.meta.test_accuracy);
    let mut tables = BTreeMap::new();
    for (pname, protocol) in [("I", Protocol::I), ("II", Protocol::II)] {
        let trained = match protocol {
            Protocol::I => &f.targets[..1],
            Protocol::II => &f.targets[..],
        };
        let (g, log) = train_face_generator(c, &world, trained, seed)?;
        log.save_csv(&run.path("logs", &format!("face_generator_{pname}_train.csv")))?;
        g.save(&run.path("checkpoints", &format!("face_generator_{pname}.ckpt")))?;
        let gen_rows = eval::face_protocol(
            |x, t| Ok(g.generate(x, &vec![t; x.dim(0)], Phase::Eval)?.adversarial),
            &models,
            &setup,
            protocol,
        )?;
        let mim_rows = eval::face_protocol(
            |x, t| {
                let r = ref_emb.select(&vec![t; x.dim(0)]);
                run_iterative_attack(x, Objective::Embedding(&r), &world.white_box.net, &mim)
            },
            &models,
            &setup,
            protocol,
        )?;
        for (name, rows) in [("generator", &gen_rows), ("mim", &mim_rows)] {
            metrics.insert(format!("{name}/{pname}/white_box"), eval::face_mean(rows, 0));
            metrics.insert(format!("{name}/{pname}/black_box"), eval::face_mean(rows, 1));
        }
        tables.insert(pname, serde_json::json!({ "generator": gen_rows, "mim": mim_rows }));
    }
    run.write_json("reports", "face.json", &tables)?;
    Ok(metrics)
}
