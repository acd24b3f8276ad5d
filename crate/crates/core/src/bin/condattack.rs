use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use condattack::attacks::{run_iterative_attack_chunked, IterAttackConfig, Method};
use condattack::checkpoint::Checkpoint;
use condattack::data::{
    load_image_dir, load_labeled_dir, save_labeled_dir, synth_faces, synth_textures, write_npy, write_png,
};
use condattack::experiment::{load_config, run_experiment, toy_train_config, validate_config};
use condattack::generator::{Generator, GeneratorConfig, Phase};
use condattack::partition::{hierarchical_partition, Bandwidth, ClassSpace, PartitionFile};
use condattack::train::{train_generator, LossKind, TrainConfig, TrainTarget};
use condattack::zoo::{train_toy_classifier, Arch, Classifier, ClassifierTrainConfig, EmbeddingModel};
use condattack::{Error, Result, Tensor};

/// Conditional generative targeted attacks, iterative baselines and transfer benchmarks.
#[derive(Parser)]
#[command(name = "condattack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a label space into diverse class subsets with repeated k-DPP draws.
    Partition(PartitionArgs),
    /// Apply a trained generator to a directory of images.
    Generate(GenerateArgs),
    /// Train a conditional generator against a frozen model.
    Train(TrainArgs),
    /// Run an iterative baseline attack on a directory of images.
    Attack(AttackArgs),
    /// Train or list toy classifiers.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Write procedural datasets to disk.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Execute an experiment config and write a run directory.
    Run {
        /// TOML experiment config.
        config: PathBuf,
    },
    /// Check an experiment config and list every problem.
    Validate {
        /// TOML experiment config.
        config: PathBuf,
    },
}

#[derive(Args)]
struct PartitionArgs {
    /// Class weights: a classifier checkpoint, a `[D, K]` .npy array or a CSV with one row per dimension.
    #[arg(long)]
    weights: PathBuf,
    /// Subset size.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// RBF bandwidth: `auto` (median pairwise distance) or a positive number.
    #[arg(long, default_value = "auto")]
    bandwidth: String,
    /// Output partition file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    /// Target class id.
    #[arg(long)]
    target: usize,
    /// Output directory for adversarial PNGs and `<name>.delta.npy` perturbations.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Embed,
}

#[derive(Args)]
struct TrainArgs {
    /// Frozen classifier checkpoint (`--loss ce`) or embedding checkpoint (`--loss embed`).
    #[arg(long)]
    model: PathBuf,
    /// Labelled image directory (`<dir>/<class>/*.png`).
    #[arg(long)]
    data: PathBuf,
    /// Conditional classes: `<partition-file>:<subset index>` or a comma-separated list.
    #[arg(long)]
    classes: String,
    #[arg(long, value_enum, default_value = "ce")]
    loss: LossArg,
    /// Training iterations.
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long)]
    seed: u64,
    /// Perturbation budget in [0,1] pixel units.
    #[arg(long, default_value_t = 16.0 / 255.0)]
    eps: f64,
    #[arg(long)]
    lr: Option<f64>,
    /// Generator config as JSON (fields of the generator section).
    #[arg(long)]
    generator_config: Option<PathBuf>,
    /// Output generator checkpoint; the training log goes next to it as `<out>.log.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// White-box classifier checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    target: usize,
    /// Perturbation budget in [0,1] pixel units.
    #[arg(long, default_value_t = 16.0 / 255.0)]
    eps: f64,
    /// Iterations; defaults to the method's standard count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for adversarial PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ZooCommand {
    /// Train a toy classifier on procedural textures.
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        seed: u64,
        /// Labelled training directory; procedural textures when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Labelled test directory (required with --data).
        #[arg(long, requires = "data")]
        test_data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        epochs: usize,
        /// Fail when held-out accuracy ends below this fraction.
        #[arg(long, default_value_t = ClassifierTrainConfig::default().accuracy_floor)]
        min_accuracy: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List checkpoints in a directory.
    List {
        #[arg(default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Textures,
    Faces,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Render a procedural dataset as labelled PNGs.
    Synth {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        /// Classes (textures) or identities (faces).
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Images in total (textures) or per identity (faces).
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Partition(a) => partition(a),
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Zoo(ZooCommand::Train {
            arch,
            seed,
            data,
            test_data,
            epochs,
            min_accuracy,
            out,
        }) => {
            let (train, test) = match (data, test_data) {
                (Some(a), Some(b)) => (load_labeled_dir(&a)?, load_labeled_dir(&b)?),
                (Some(_), None) => return Err(Error::Config(vec!["--test-data is required with --data".into()])),
                _ => (synth_textures(10, 4000, 32, 1), synth_textures(10, 1000, 32, 2)),
            };
            let cfg = ClassifierTrainConfig {
                epochs,
                accuracy_floor: min_accuracy,
                ..ClassifierTrainConfig::default()
            };
            let m = train_toy_classifier(&train, &test, arch, seed, &cfg)?;
            m.save(&out)?;
            println!(
                "{arch} seed {seed}: test accuracy {:.4} -> {}",
                m.meta.test_accuracy,
                out.display()
            );
            Ok(())
        }
        Command::Zoo(ZooCommand::List { dir }) => zoo_list(&dir),
        Command::Dataset(DatasetCommand::Synth {
            kind,
            classes,
            count,
            size,
            seed,
            out,
        }) => {
            let data = match kind {
                DatasetKind::Textures => synth_textures(classes, count, size, seed),
                DatasetKind::Faces => synth_faces(0..classes, count, size, seed, seed ^ 0x5a),
            };
            save_labeled_dir(&out, &data)?;
            println!("{} images -> {}", data.len(), out.display());
            Ok(())
        }
        Command::Run { config } => {
            let loaded = load_config(&config)?;
            let outcome = run_experiment(&loaded)?;
            println!("run directory: {}", outcome.run_dir.display());
            for (k, v) in &outcome.metrics {
                println!("  {k} = {v:.4}");
            }
            Ok(())
        }
        Command::Validate { config } => {
            let loaded = load_config(&config)?;
            let errs = validate_config(&loaded);
            if errs.is_empty() {
                println!("ok ({})", loaded.hash);
                Ok(())
            } else {
                Err(Error::Config(errs))
            }
        }
    }
}

fn read_weights(path: &Path) -> Result<ClassSpace> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "npy" => {
            let t = condattack::data::read_npy(path)?;
            if t.shape().len() != 2 {
                return Err(Error::Input(format!("{}: expected a 2-D [D, K] array", path.display())));
            }
            let (d, k) = (t.dim(0), t.dim(1));
            let cols: Vec<Vec<f64>> = (0..k)
                .map(|c| (0..d).map(|r| t.data()[r * k + c] as f64).collect())
                .collect();
            ClassSpace::from_columns(&cols)
        }
        "csv" | "txt" => {
            let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
                rows.push(row);
            }
            let k = rows.first().map_or(0, Vec::len);
            let cols: Vec<Vec<f64>> = (0..k).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
            ClassSpace::from_columns(&cols)
        }
        _ => Classifier::load(path)?.class_space(),
    }
}

fn partition(a: PartitionArgs) -> Result<()> {
    let bw: Bandwidth = a
        .bandwidth
        .parse()
        .map_err(|e: Error| Error::Config(vec![format!("--bandwidth: {e}")]))?;
    let space = read_weights(&a.weights)?;
    if a.k == 0 || a.k > space.num_classes() {
        return Err(Error::Config(vec![format!(
            "--k: must lie in [1, {}]",
            space.num_classes()
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (p, sigma) = hierarchical_partition(&space, a.k, bw, &mut rng)?;
    PartitionFile::new(&p, a.seed, sigma, bw).save(&a.out)?;
    for (i, s) in p.subsets.iter().enumerate() {
        println!("subset {i}: {s:?}");
    }
    Ok(())
}

fn write_outputs(out: &Path, paths: &[PathBuf], adv: &Tensor<f32>, delta: Option<&Tensor<f32>>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Input(format!("{}: {e}", out.display())))?;
    let (c, h, w) = (adv.dim(1), adv.dim(2), adv.dim(3));
    for (i, p) in paths.iter().enumerate() {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_png(&out.join(format!("{stem}.png")), adv.item(i), c, h, w)?;
        if let Some(d) = delta {
            write_npy(&out.join(format!("{stem}.delta.npy")), &[c, h, w], d.item(i))?;
        }
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let g = Generator::load(&a.ckpt)?;
    let (x, paths) = load_image_dir(&a.images)?;
    let out = g.generate(&x, &vec![a.target; x.dim(0)], Phase::Eval)?;
    write_outputs(&a.out, &paths, &out.adversarial, Some(&out.delta.values))?;
    println!("{} images -> {}", paths.len(), a.out.display());
    Ok(())
}

fn parse_classes(arg: &str) -> Result<Vec<usize>> {
    if let Some((file, idx)) = arg.rsplit_once(':') {
        if Path::new(file).is_file() {
            let doc = PartitionFile::load(Path::new(file))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::Config(vec![format!("--classes: bad subset index {idx:?}")]))?;
            return doc
                .subsets
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Config(vec![format!("--classes: {file} has {} subsets", doc.subsets.len())]));
        }
    }
    arg.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::Config(vec![format!(
                    "--classes: {s:?} is not a class id or partition reference"
                )])
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let classes = parse_classes(&a.classes)?;
    let data = load_labeled_dir(&a.data)?;
    let mut gcfg: GeneratorConfig = match &a.generator_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => condattack::experiment::toy_generator_config(),
    };
    gcfg.epsilon = a.eps;
    gcfg.image_channels = data.images.dim(1);
    let base = toy_train_config();
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        max_iterations: a.iters,
        epsilon: a.eps,
        conditional_classes: classes,
        seed: a.seed,
        loss_kind: match a.loss {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::Embed => LossKind::EmbeddingDistance,
        },
        ..base
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let log = match a.loss {
        LossArg::Ce => {
            let model = Classifier::load(&a.model)?;
            gcfg.num_classes = model.num_classes();
            cfg.validate(gcfg.num_classes)?;
            let mut g = Generator::new(gcfg, &mut rng)?;
            let log = train_generator(&mut g, &TrainTarget::Classifier(&model.net), &data.images, None, &cfg)?;
            g.save(&a.out)?;
            log
        }
        LossArg::Embed => {
            let model = EmbeddingModel::load(&a.model)?;
            let refs_idx: Vec<usize> = (0..data.num_classes)
                .map(|id| {
                    data.labels
                        .iter()
                        .position(|&l| l == id)
                        .ok_or_else(|| Error::Input(format!("identity {id} has no images in {}", a.data.display())))
                })
                .collect::<Result<_>>()?;
            let refs = model.embed(&data.images.select(&refs_idx))?;
            gcfg.num_classes = data.num_classes;
            cfg.validate(gcfg.num_classes)?;
            let mut g = Generator::new(gcfg, &mut rng)?;
            let target = TrainTarget::Embedding {
                model: &model.net,
                references: &refs,
                threshold: model.threshold,
            };
            let log = train_generator(&mut g, &target, &data.images, None, &cfg)?;
            g.save(&a.out)?;
            log
        }
    };
    let log_path = PathBuf::from(format!("{}.log.csv", a.out.display()));
    log.save_csv(&log_path)?;
    println!(
        "final loss {:.4} (trailing 100) -> {}",
        log.trailing_mean(100),
        a.out.display()
    );
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let model = Classifier::load(&a.model)?;
    if a.target >= model.num_classes() {
        return Err(Error::Config(vec![format!(
            "--target: class {} outside the model's {} classes",
            a.target,
            model.num_classes()
        )]));
    }
    let cfg = IterAttackConfig::preset(a.method, a.eps, a.steps, a.seed);
    cfg.validate()?;
    let (x, paths) = load_image_dir(&a.images)?;
    let adv = run_iterative_attack_chunked(&x, &vec![a.target; x.dim(0)], &model.net, &cfg, 64)?;
    write_outputs(&a.out, &paths, &adv, None)?;
    let rate = condattack::eval::targeted_success_rate(&adv, &vec![a.target; x.dim(0)], &model)?;
    println!(
        "{} images, white-box targeted success {:.1}% -> {}",
        paths.len(),
        100.0 * rate,
        a.out.display()
    );
    Ok(())
}

fn zoo_list(dir: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    for p in entries {
        let Ok(ck) = Checkpoint::load(&p) else { continue };
        let meta = &ck.meta;
        let model = &meta["model"];
        println!(
            "{:<10} {:<9} seed {:<6} acc {:<7} adv {:<5} {}",
            ck.kind,
            meta["arch"].as_str().unwrap_or("-"),
            model["seed"].as_u64().map_or("-".into(), |s| s.to_string()),
            model["test_accuracy"]
                .as_f64()
                .map_or("-".into(), |a| format!("{a:.4}")),
            model["adversarially_finetuned"].as_bool().unwrap_or(false),
            p.display()
        );
    }
    Ok(())
}
