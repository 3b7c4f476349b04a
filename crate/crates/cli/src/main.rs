//! Command-line entry points for the attack/defense workbench.
//!
//! Exit codes: 0 success, 2 configuration/validation, 3 dataset
//! ingestion, 4 classifier training, 5 attack generation, 6 defense
//! training, 7 evaluation, 8 reporting, 9 checkpoint/io, 1 anything else.

use advlab_core::attacks::{
    run_attack, AttackConfig, CwConfig, DeepFoolConfig, FgsConfig,
};
use advlab_core::checkpoint::{load_adv_batch, load_model, save_adv_batch, save_model, NoiseSource};
use advlab_core::config::ExperimentConfig;
use advlab_core::datasets::{load_cifar10, load_mnist, make_synthetic, Images, LabeledDataset};
use advlab_core::defense::{dae_preset, train_dae_on_batches, DefenseEnsembleConfig};
use advlab_core::error::Error;
use advlab_core::imgdump::dump_images;
use advlab_core::nn::{
    build_model, evaluate_accuracy, presets::classifier_preset, train, OptimizerKind, TrainConfig,
    TrainLoss,
};
use advlab_core::pipeline::{render_report, run_experiment, ReportFormat, ResultsDoc, RunOptions};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "advlab", version, about = "Train classifiers, craft gradient-based attacks, and evaluate DAE defenses")]
struct Cli {
    /// Global seed override for `run`/`evaluate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts (default ./advlab-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Directory with MNIST IDX files.
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Directory with CIFAR-10 binary batches.
    #[arg(long, global = true)]
    cifar_dir: Option<PathBuf>,
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic training samples when no dataset directory is given.
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    /// Synthetic test samples.
    #[arg(long, default_value_t = 500)]
    synthetic_test: usize,
    /// Seed for synthetic data generation.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a classifier preset and save the checkpoint.
    TrainClassifier {
        /// Preset name, e.g. mnist-fc-victim.
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        learning_rate: f64,
        /// adam | rmsprop | sgd
        #[arg(long, default_value = "adam")]
        optimizer: String,
        /// Train-time augmentation (rotations/shifts/flips).
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate an adversarial batch against a trained model.
    GenAttack {
        /// Checkpoint path, or a model name resolved in --out-dir/models.
        #[arg(long)]
        model: String,
        /// fgs | deepfool | cw
        #[arg(long)]
        algo: String,
        /// l2 budget for fgs.
        #[arg(long, default_value_t = 2.5)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Attack the first N samples of the chosen split.
        #[arg(long)]
        count: Option<usize>,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Clamp perturbed images to [0,1].
        #[arg(long)]
        clip: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a DAE on an ensemble of attacked training data.
    TrainDae {
        /// JSON file: list of {"algorithm", "model", "epsilon"?} triples.
        #[arg(long)]
        train_attacks: PathBuf,
        /// mnist-dae | cifar-dae
        #[arg(long)]
        arch: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the scenario evaluation of an experiment config.
    Evaluate {
        /// Experiment config file (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Where to copy results.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a results.json file as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// json | csv | md
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Render adversarial batches as a PGM/PPM grid (clean row on top).
    DumpImages {
        /// One or more adv-batch checkpoints; each adds a perturbed row.
        #[arg(long = "in", num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        cols: usize,
    },
    /// Run the full train -> attack -> train-dae -> evaluate pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Stage { stage, source } => {
            let by_stage = match stage.split(':').next().unwrap_or("") {
                "validate" => Some(2),
                "dataset" => Some(3),
                "train" => Some(4),
                "attack" => Some(5),
                "dae" => Some(6),
                "evaluate" => Some(7),
                "report" => Some(8),
                _ => None,
            };
            by_stage.unwrap_or_else(|| exit_code_for(source))
        }
        Error::Config(_) | Error::Spec { .. } | Error::Contract(_) | Error::Domain(_) => 2,
        Error::Ingestion(_) => 3,
        Error::Training { .. } => 4,
        Error::Checkpoint(_) | Error::Io(_) => 9,
        _ => 1,
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("advlab-out"))
}

fn load_splits(cli: &Cli, data: &DataArgs) -> Result<(LabeledDataset, LabeledDataset), Error> {
    if let Some(dir) = &cli.mnist_dir {
        let train = load_mnist(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = load_mnist(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        return Ok((train, test));
    }
    if let Some(dir) = &cli.cifar_dir {
        let mut parts = Vec::new();
        for i in 1..=5 {
            let p = dir.join(format!("data_batch_{i}.bin"));
            if p.exists() {
                parts.push(load_cifar10(&p)?);
            }
        }
        if parts.is_empty() {
            return Err(Error::Ingestion(format!(
                "no data_batch_*.bin under {}",
                dir.display()
            )));
        }
        let images: Vec<&Images> = parts.iter().map(|p| &p.images).collect();
        let train = LabeledDataset::new(
            Images::concat(&images)?,
            parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            advlab_core::datasets::Provenance::Cifar10,
        )?;
        let test = load_cifar10(&dir.join("test_batch.bin"))?;
        return Ok((train, test));
    }
    Ok((
        make_synthetic(data.synthetic_train, data.data_seed)?,
        make_synthetic(data.synthetic_test, data.data_seed + 1)?,
    ))
}

fn resolve_model(cli: &Cli, name_or_path: &str) -> Result<advlab_core::nn::Model, Error> {
    let direct = Path::new(name_or_path);
    let path = if direct.exists() {
        direct.to_path_buf()
    } else {
        let candidate = out_dir(cli).join("models").join(format!("{name_or_path}.ansm"));
        if !candidate.exists() {
            return Err(Error::Config(format!(
                "'{name_or_path}' is neither a checkpoint file nor a model under {}",
                candidate.display()
            )));
        }
        candidate
    };
    Ok(load_model(&path)?.0)
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, Error> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "rmsprop" => Ok(OptimizerKind::Rmsprop),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleTriple {
    algorithm: String,
    /// Trained classifier checkpoint whose gradients simulate the noise.
    model: PathBuf,
    #[serde(default)]
    epsilon: Option<f64>,
}

fn attack_config_for(algorithm: &str, epsilon: Option<f64>, clip: bool) -> Result<AttackConfig, Error> {
    match algorithm {
        "fgs" => Ok(AttackConfig::Fgs(FgsConfig {
            epsilon: epsilon.unwrap_or(2.5),
            clip,
        })),
        "deepfool" => Ok(AttackConfig::DeepFool(DeepFoolConfig {
            clip,
            ..Default::default()
        })),
        "cw" => Ok(AttackConfig::Cw(CwConfig::desk())),
        _ => Err(Error::Config(format!("unknown attack algorithm '{algorithm}'"))),
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::TrainClassifier {
            model,
            out,
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            augment,
            train_seed,
            data,
        } => {
            let spec = classifier_preset(model)
                .ok_or_else(|| Error::Config(format!("unknown preset '{model}'")))?;
            let (train_ds, test_ds) = load_splits(cli, data).map_err(|e| e.in_stage("dataset"))?;
            let mut m = build_model(&spec, *train_seed)?;
            let cfg = TrainConfig {
                loss: TrainLoss::CategoricalCrossentropy,
                optimizer: parse_optimizer(optimizer)?,
                learning_rate: *learning_rate,
                batch_size: *batch_size,
                epochs: *epochs,
                seed: *train_seed,
                augment: augment.then(|| advlab_core::datasets::AugmentConfig {
                    max_rotation_degrees: 15.0,
                    max_shift_fraction: 0.1,
                    horizontal_flip: true,
                    seed: *train_seed,
                }),
            };
            let history = train(&mut m, &train_ds, &cfg).map_err(|e| e.in_stage("train"))?;
            let acc = evaluate_accuracy(&m, &test_ds)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_model(out, &m, None)?;
            println!(
                "trained {model}: final train loss {:.4}, test accuracy {acc:.4}, saved to {}",
                history.last().map(|h| h.loss).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Cmd::GenAttack {
            model,
            algo,
            eps,
            out,
            count,
            split,
            clip,
            data,
        } => {
            let m = resolve_model(cli, model)?;
            let (train_ds, test_ds) = load_splits(cli, data).map_err(|e| e.in_stage("dataset"))?;
            let ds = match split.as_str() {
                "train" => train_ds,
                "test" => test_ds,
                other => return Err(Error::Config(format!("unknown split '{other}'"))),
            };
            let ds = match count {
                Some(n) => ds.take(*n),
                None => ds,
            };
            let cfg = attack_config_for(algo, Some(*eps), *clip)?;
            let batch = run_attack(&m, &cfg, &ds.images, &ds.labels)
                .map_err(|e| e.in_stage("attack"))?;
            let succ = batch.success.iter().filter(|&&s| s).count();
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_adv_batch(out, &batch)?;
            println!(
                "{algo} on {}: {} samples, {succ} misclassified, mean norm {:.4}, saved to {}",
                batch.source_model,
                batch.len(),
                batch.norms.iter().sum::<f64>() / batch.len() as f64,
                out.display()
            );
            Ok(())
        }
        Cmd::TrainDae {
            train_attacks,
            arch,
            out,
            epochs,
            batch_size,
            train_seed,
            data,
        } => {
            let spec_text = std::fs::read_to_string(train_attacks)?;
            let triples: Vec<EnsembleTriple> = serde_json::from_str(&spec_text)
                .map_err(|e| Error::Config(format!("ensemble spec: {e}")))?;
            if triples.is_empty() {
                return Err(Error::Config("empty ensemble spec".into()));
            }
            let dae_spec = dae_preset(arch)
                .ok_or_else(|| Error::Config(format!("unknown DAE preset '{arch}'")))?;
            let (train_ds, _) = load_splits(cli, data).map_err(|e| e.in_stage("dataset"))?;
            let mut batches = Vec::new();
            let mut sources = Vec::new();
            for t in &triples {
                let m = load_model(&t.model)?.0;
                let cfg = attack_config_for(&t.algorithm, t.epsilon, false)?;
                let batch = run_attack(&m, &cfg, &train_ds.images, &train_ds.labels)
                    .map_err(|e| e.in_stage("attack"))?;
                sources.push(NoiseSource {
                    algorithm: cfg.algorithm(),
                    model: m.spec.name.clone(),
                    arch: m.spec.arch_type(),
                });
                batches.push(batch);
            }
            let ens = DefenseEnsembleConfig {
                attacks: Vec::new(),
                dae_spec,
                train: TrainConfig {
                    loss: TrainLoss::Mse,
                    optimizer: OptimizerKind::Adam,
                    learning_rate: 0.001,
                    batch_size: *batch_size,
                    epochs: *epochs,
                    seed: *train_seed,
                    augment: None,
                },
                shuffle_seed: *train_seed,
                dae_seed: train_seed.wrapping_add(1),
            };
            let (dae, history) = train_dae_on_batches(&train_ds.images, &batches, &ens)
                .map_err(|e| e.in_stage("dae"))?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_model(out, &dae, Some(sources))?;
            println!(
                "trained {arch} on {} pairs: final MSE {:.6}, saved to {}",
                train_ds.len() * (batches.len() + 1),
                history.last().map(|h| h.loss).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Cmd::Evaluate { scenario, out } => {
            let mut cfg = ExperimentConfig::from_file(scenario)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = run_experiment(
                &cfg,
                &RunOptions {
                    out_dir: out_dir(cli),
                    threads: cli.threads,
                },
            )?;
            std::fs::copy(&outcome.results_path, out)?;
            println!("results written to {}", out.display());
            Ok(())
        }
        Cmd::Report { input, format } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::Io(e).in_stage("report"))?;
            let doc: ResultsDoc = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("results.json: {e}")).in_stage("report"))?;
            let fmt = ReportFormat::parse(format)
                .ok_or_else(|| Error::Config(format!("unknown format '{format}'")).in_stage("report"))?;
            print!("{}", render_report(&doc, fmt));
            Ok(())
        }
        Cmd::DumpImages { input, out, cols } => {
            let batches: Vec<_> = input
                .iter()
                .map(|p| load_adv_batch(p))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&_> = batches.iter().collect();
            dump_images(&refs, out, *cols)?;
            println!("grid written to {}", out.display());
            Ok(())
        }
        Cmd::Run { config } => {
            let mut cfg = ExperimentConfig::from_file(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = run_experiment(
                &cfg,
                &RunOptions {
                    out_dir: out_dir(cli),
                    threads: cli.threads,
                },
            )?;
            for s in &outcome.stages {
                println!(
                    "{} {}",
                    if s.cache_hit { "cached " } else { "ran    " },
                    s.stage
                );
            }
            println!("results: {}", outcome.results_path.display());
            Ok(())
        }
    }
}
