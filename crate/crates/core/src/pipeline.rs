//! End-to-end experiment orchestration with content-addressed stage
//! caching.
//!
//! Stage outputs (model checkpoints, adversarial batches, trained DAEs,
//! results.json) live in the output directory next to a `.key` sidecar
//! holding the SHA-256 of everything that went into producing them.
//! A stage is skipped only when its artifact exists and the sidecar
//! matches the freshly computed key, so stale outputs are never served.

use crate::attacks::run_attack;
use crate::checkpoint::{load_adv_batch, load_model, save_adv_batch, save_model, NoiseSource};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::datasets::{load_cifar10, load_mnist, make_synthetic, LabeledDataset};
use crate::defense::{dae_preset, train_dae_on_batches, DefenseEnsembleConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    run_scenario, Accuracy, AttackerSpec, DefenseEntry, ScenarioResult, ScenarioSpec,
};
use crate::nn::{build_model, evaluate_counts, presets::classifier_preset, train, Model};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker thread count; pool construction is process-global, so the
    /// first caller wins.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub cache_hit: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub preset: String,
    pub clean_test: Accuracy,
    pub clean_test_accuracy: f64,
}

/// The results.json document. Contains no timestamps or absolute paths:
/// a rerun with the same config and seed must produce identical bytes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub config_digest: String,
    pub seed: u64,
    pub dataset: String,
    pub models: Vec<ModelReport>,
    pub scenarios: Vec<ScenarioResult>,
}

pub struct ExperimentOutcome {
    pub results: ResultsDoc,
    pub results_path: PathBuf,
    pub stages: Vec<StageLog>,
}

/// Exclusive ownership of the output directory for the process lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(
                format!("output directory is locked by {}", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&[&std::fs::read(path)?]))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

fn seed_for(global: u64, tag: &str) -> u64 {
    mix(global, fnv1a(tag))
}

fn json_of<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Config(format!("serialize: {e}")))
}

/// Artifact + sidecar cache check.
fn cache_fresh(artifact: &Path, key: &str) -> bool {
    let sidecar = artifact.with_extension("ansm.key");
    match (artifact.exists(), std::fs::read_to_string(&sidecar)) {
        (true, Ok(stored)) => stored.trim() == key,
        _ => false,
    }
}

fn write_sidecar(artifact: &Path, key: &str) -> Result<()> {
    std::fs::write(artifact.with_extension("ansm.key"), key)?;
    Ok(())
}

struct Splits {
    train: LabeledDataset,
    test: LabeledDataset,
    fingerprint: String,
    description: String,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Splits> {
    let (mut train, mut test, description) = match &cfg.dataset.source {
        DatasetSource::Synthetic { n_train, n_test } => {
            let train = make_synthetic(*n_train, seed_for(cfg.seed, "dataset/train"))?;
            let test = make_synthetic(*n_test, seed_for(cfg.seed, "dataset/test"))?;
            (train, test, format!("synthetic({n_train}/{n_test})"))
        }
        DatasetSource::Mnist { dir } => {
            let train = load_mnist(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            (train, test, "mnist".to_string())
        }
        DatasetSource::Cifar10 {
            train_files,
            test_file,
        } => {
            let mut parts = Vec::new();
            for f in train_files {
                parts.push(load_cifar10(f)?);
            }
            let images: Vec<&crate::datasets::Images> =
                parts.iter().map(|p| &p.images).collect();
            let train = LabeledDataset::new(
                crate::datasets::Images::concat(&images)?,
                parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
                crate::datasets::Provenance::Cifar10,
            )?;
            let test = load_cifar10(test_file)?;
            (train, test, "cifar10".to_string())
        }
    };
    if let Some(n) = cfg.dataset.train_subset {
        if n > train.len() {
            return Err(Error::Config(format!(
                "train subset {n} exceeds {} available",
                train.len()
            )));
        }
        train = train.take(n);
    }
    if let Some(n) = cfg.dataset.test_subset {
        if n > test.len() {
            return Err(Error::Config(format!(
                "test subset {n} exceeds {} available",
                test.len()
            )));
        }
        test = test.take(n);
    }
    // Content fingerprint feeds every downstream cache key.
    let mut hasher = Sha256::new();
    for ds in [&train, &test] {
        hasher.update((ds.len() as u64).to_le_bytes());
        for v in &ds.images.data {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(&ds.labels);
    }
    let digest = hasher.finalize();
    let fingerprint = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(Splits {
        train,
        test,
        fingerprint,
        description,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Execute the full train -> attack -> train-dae -> evaluate pipeline.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| e.in_stage("validate"))?;
    if let Some(t) = opts.threads {
        // First build_global wins; later runs in-process keep the pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let _lock = DirLock::acquire(&opts.out_dir)?;
    for sub in ["models", "attacks", "daes"] {
        std::fs::create_dir_all(opts.out_dir.join(sub))?;
    }
    let mut stages = Vec::new();
    let config_json = json_of(cfg)?;
    let config_digest = sha256_hex(&[config_json.as_bytes()]);

    let splits = load_dataset(cfg).map_err(|e| e.in_stage("dataset"))?;
    stages.push(StageLog {
        stage: "dataset".into(),
        cache_hit: false,
    });

    // Stage: train classifiers.
    let mut models: BTreeMap<String, (Model, PathBuf)> = BTreeMap::new();
    let mut model_reports = Vec::new();
    for entry in &cfg.models {
        let stage = format!("train:{}", entry.name);
        let artifact = opts.out_dir.join("models").join(format!("{}.ansm", entry.name));
        let key = sha256_hex(&[
            json_of(entry)?.as_bytes(),
            splits.fingerprint.as_bytes(),
            &cfg.seed.to_le_bytes(),
        ]);
        let hit = cache_fresh(&artifact, &key);
        let model = if hit {
            load_model(&artifact).map_err(|e| e.in_stage(&stage))?.0
        } else {
            let spec = classifier_preset(&entry.preset)
                .ok_or_else(|| Error::Config(format!("unknown preset {}", entry.preset)))
                .map_err(|e| e.in_stage(&stage))?;
            let build_seed = mix(seed_for(cfg.seed, &format!("build:{}", entry.name)), entry.train.seed);
            let mut model = build_model(&spec, build_seed).map_err(|e| e.in_stage(&stage))?;
            let mut train_cfg = entry.train.clone();
            train_cfg.seed = mix(seed_for(cfg.seed, &format!("train:{}", entry.name)), entry.train.seed);
            if let Some(aug) = &mut train_cfg.augment {
                aug.seed = mix(seed_for(cfg.seed, &format!("augment:{}", entry.name)), aug.seed);
            }
            train(&mut model, &splits.train, &train_cfg).map_err(|e| e.in_stage(&stage))?;
            save_model(&artifact, &model, None).map_err(|e| e.in_stage(&stage))?;
            write_sidecar(&artifact, &key)?;
            model
        };
        let (correct, total) = evaluate_counts(&model, &splits.test).map_err(|e| e.in_stage(&stage))?;
        model_reports.push(ModelReport {
            name: entry.name.clone(),
            preset: entry.preset.clone(),
            clean_test: Accuracy { correct, total },
            clean_test_accuracy: correct as f64 / total as f64,
        });
        models.insert(entry.name.clone(), (model, artifact));
        stages.push(StageLog {
            stage,
            cache_hit: hit,
        });
    }

    // Collect the attack jobs needed by defenses (train split) and
    // scenario attackers (test split).
    let mut jobs: BTreeMap<(String, String, Split), PathBuf> = BTreeMap::new();
    for d in &cfg.defenses {
        for s in &d.sources {
            jobs.insert(
                (s.attack.clone(), s.model.clone(), Split::Train),
                PathBuf::new(),
            );
        }
    }
    for s in &cfg.scenarios {
        if let Some(att) = &s.attacker {
            jobs.insert(
                (att.attack.clone(), att.model.clone(), Split::Test),
                PathBuf::new(),
            );
        }
    }

    // Stage: generate adversarial batches.
    for ((attack_name, model_name, split), artifact_slot) in jobs.iter_mut() {
        let stage = format!("attack:{attack_name}x{model_name}:{}", split.tag());
        let attack_entry = cfg.attack(attack_name).expect("validated");
        let (model, model_path) = &models[model_name];
        let artifact = opts.out_dir.join("attacks").join(format!(
            "{attack_name}__{model_name}__{}.ansm",
            split.tag()
        ));
        let key = sha256_hex(&[
            json_of(attack_entry)?.as_bytes(),
            file_sha256(model_path)?.as_bytes(),
            splits.fingerprint.as_bytes(),
            split.tag().as_bytes(),
            &cfg.seed.to_le_bytes(),
        ]);
        let hit = cache_fresh(&artifact, &key);
        if !hit {
            let data = match split {
                Split::Train => &splits.train,
                Split::Test => &splits.test,
            };
            let mut attack_cfg = attack_entry.config.clone();
            if let crate::attacks::AttackConfig::Cw(c) = &mut attack_cfg {
                c.seed = mix(seed_for(cfg.seed, &stage), c.seed);
            }
            let batch = run_attack(model, &attack_cfg, &data.images, &data.labels)
                .map_err(|e| e.in_stage(&stage))?;
            save_adv_batch(&artifact, &batch).map_err(|e| e.in_stage(&stage))?;
            write_sidecar(&artifact, &key)?;
        }
        *artifact_slot = artifact;
        stages.push(StageLog {
            stage,
            cache_hit: hit,
        });
    }

    // Stage: train DAEs.
    let mut pool: Vec<DefenseEntry> = Vec::new();
    for d in &cfg.defenses {
        let stage = format!("dae:{}", d.name);
        let artifact = opts.out_dir.join("daes").join(format!("{}.ansm", d.name));
        let mut key_parts: Vec<String> = vec![json_of(d)?];
        for s in &d.sources {
            let path = &jobs[&(s.attack.clone(), s.model.clone(), Split::Train)];
            key_parts.push(file_sha256(path)?);
        }
        let key_concat = key_parts.join("|");
        let key = sha256_hex(&[key_concat.as_bytes(), &cfg.seed.to_le_bytes()]);
        let hit = cache_fresh(&artifact, &key);
        let sources: Vec<NoiseSource> = d
            .sources
            .iter()
            .map(|s| NoiseSource {
                algorithm: cfg.attack(&s.attack).expect("validated").config.algorithm(),
                model: s.model.clone(),
                arch: models[&s.model].0.spec.arch_type(),
            })
            .collect();
        let dae = if hit {
            load_model(&artifact).map_err(|e| e.in_stage(&stage))?.0
        } else {
            let batches: Vec<crate::attacks::AdversarialBatch> = d
                .sources
                .iter()
                .map(|s| {
                    load_adv_batch(&jobs[&(s.attack.clone(), s.model.clone(), Split::Train)])
                })
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage(&stage))?;
            let mut train_cfg = d.train.clone();
            train_cfg.seed = mix(seed_for(cfg.seed, &stage), d.train.seed);
            let ens_cfg = DefenseEnsembleConfig {
                attacks: Vec::new(), // batches precomputed by the attack stage
                dae_spec: dae_preset(&d.dae)
                    .ok_or_else(|| Error::Config(format!("unknown DAE preset {}", d.dae)))
                    .map_err(|e| e.in_stage(&stage))?,
                train: train_cfg,
                shuffle_seed: seed_for(cfg.seed, &format!("shuffle:{}", d.name)),
                dae_seed: seed_for(cfg.seed, &format!("daeinit:{}", d.name)),
            };
            let (dae, _history) = train_dae_on_batches(&splits.train.images, &batches, &ens_cfg)
                .map_err(|e| e.in_stage(&stage))?;
            save_model(&artifact, &dae, Some(sources.clone())).map_err(|e| e.in_stage(&stage))?;
            write_sidecar(&artifact, &key)?;
            dae
        };
        pool.push(DefenseEntry {
            name: d.name.clone(),
            sources: sources
                .iter()
                .map(|s| (s.algorithm, s.arch))
                .collect(),
            dae,
        });
        stages.push(StageLog {
            stage,
            cache_hit: hit,
        });
    }

    // Stage: evaluate scenarios.
    let results_path = opts.out_dir.join("results.json");
    let mut eval_key_parts: Vec<String> = vec![config_json.clone(), splits.fingerprint.clone()];
    for (_, path) in models.values() {
        eval_key_parts.push(file_sha256(path)?);
    }
    for path in jobs.values() {
        eval_key_parts.push(file_sha256(path)?);
    }
    for d in &cfg.defenses {
        eval_key_parts.push(file_sha256(&opts.out_dir.join("daes").join(format!("{}.ansm", d.name)))?);
    }
    let eval_key = sha256_hex(&[eval_key_parts.join("|").as_bytes()]);
    let eval_hit = cache_fresh(&results_path, &eval_key);
    let results = if eval_hit {
        let text = std::fs::read_to_string(&results_path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("results.json: {e}")).in_stage("evaluate"))?
    } else {
        let mut scenario_results: Vec<ScenarioResult> = Vec::new();
        for s in &cfg.scenarios {
            let stage = format!("evaluate:{}", s.name);
            let victim = &models[&s.victim].0;
            let (eval_data, attacker) = match &s.attacker {
                Some(att) => {
                    let batch = load_adv_batch(
                        &jobs[&(att.attack.clone(), att.model.clone(), Split::Test)],
                    )
                    .map_err(|e| e.in_stage(&stage))?;
                    let data = LabeledDataset {
                        images: batch.perturbed.clone(),
                        labels: batch.labels.clone(),
                        provenance: splits.test.provenance,
                    };
                    let spec = AttackerSpec {
                        algorithm: cfg.attack(&att.attack).expect("validated").config.algorithm(),
                        source_arch: models[&att.model].0.spec.arch_type(),
                    };
                    (data, Some(spec))
                }
                None => (splits.test.clone(), None),
            };
            let proposed = pool
                .iter()
                .find(|d| d.name == s.proposed)
                .ok_or_else(|| Error::EnumeratedGap(format!("defense {} not trained", s.proposed)))
                .map_err(|e| e.in_stage(&stage))?;
            let study_attack = s
                .study_attack
                .as_ref()
                .map(|name| cfg.attack(name).expect("validated").config.algorithm());
            let study_arch = attacker
                .as_ref()
                .map(|a| a.source_arch)
                .or_else(|| proposed.sources.iter().map(|(_, arch)| *arch).next())
                .unwrap_or(crate::nn::ArchType::Fc);
            let spec = ScenarioSpec {
                name: s.name.clone(),
                vary: s.vary,
                attacker,
                study_attack,
                study_arch,
            };
            let result = run_scenario(&spec, victim, &eval_data, proposed, &pool)
                .map_err(|e| e.in_stage(&stage))?;
            scenario_results.push(result);
        }
        let doc = ResultsDoc {
            config_digest,
            seed: cfg.seed,
            dataset: splits.description.clone(),
            models: model_reports,
            scenarios: scenario_results,
        };
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Config(format!("results: {e}")).in_stage("evaluate"))?;
        std::fs::write(&results_path, &text)?;
        write_sidecar(&results_path, &eval_key)?;
        doc
    };
    stages.push(StageLog {
        stage: "evaluate".into(),
        cache_hit: eval_hit,
    });

    // Human-readable companion report.
    std::fs::write(
        opts.out_dir.join("report.md"),
        render_report(&results, ReportFormat::Md),
    )?;

    Ok(ExperimentOutcome {
        results,
        results_path,
        stages,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "md" => Some(ReportFormat::Md),
            _ => None,
        }
    }
}

/// Render a results document as a scenario table.
pub fn render_report(doc: &ResultsDoc, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(doc).expect("results serialize"),
        ReportFormat::Csv => {
            let mut out = String::from(
                "scenario,defense,role,pre_accuracy,post_accuracy,improvement,percent_increase,flags\n",
            );
            for s in &doc.scenarios {
                let pct = s
                    .percent_increase
                    .map(|p| format!("{p:.4}"))
                    .unwrap_or_else(|| "undefined".into());
                let mut row = |d: &crate::evaluation::DefenseOutcome, role: &str| {
                    out.push_str(&format!(
                        "{},{},{role},{:.6},{:.6},{:+.6},{pct},{}\n",
                        s.scenario,
                        d.defense,
                        s.pre_accuracy,
                        d.post_accuracy,
                        d.improvement,
                        flags_of(s).join("+"),
                    ));
                };
                row(&s.proposed, "proposed");
                for b in &s.baselines {
                    row(b, "baseline");
                }
            }
            out
        }
        ReportFormat::Md => {
            let mut out = String::new();
            out.push_str(&format!(
                "# Scenario results\n\ndataset: {} | seed: {} | config: {}\n\n",
                doc.dataset, doc.seed, &doc.config_digest[..12]
            ));
            out.push_str("## Classifiers\n\n| model | preset | clean test accuracy |\n|---|---|---|\n");
            for m in &doc.models {
                out.push_str(&format!(
                    "| {} | {} | {:.4} ({}/{}) |\n",
                    m.name, m.preset, m.clean_test_accuracy, m.clean_test.correct, m.clean_test.total
                ));
            }
            out.push_str(
                "\n## Scenarios\n\n| scenario | pre-defense acc | defense | post-defense acc | improvement | % increase | flags |\n|---|---|---|---|---|---|---|\n",
            );
            for s in &doc.scenarios {
                let pct = s
                    .percent_increase
                    .map(|p| format!("{p:+.2}%"))
                    .unwrap_or_else(|| "undefined".into());
                let flags = flags_of(s);
                let flag_str = if flags.is_empty() {
                    "-".to_string()
                } else {
                    flags.join(", ")
                };
                out.push_str(&format!(
                    "| {} | {:.4} | {} (proposed) | {:.4} | {:+.4} | {pct} | {flag_str} |\n",
                    s.scenario,
                    s.pre_accuracy,
                    s.proposed.defense,
                    s.proposed.post_accuracy,
                    s.proposed.improvement,
                ));
                for b in &s.baselines {
                    out.push_str(&format!(
                        "| {} | {:.4} | {} | {:.4} | {:+.4} |  |  |\n",
                        s.scenario, s.pre_accuracy, b.defense, b.post_accuracy, b.improvement,
                    ));
                }
            }
            out
        }
    }
}

fn flags_of(s: &ScenarioResult) -> Vec<String> {
    let mut flags = Vec::new();
    if s.negative_improvement {
        flags.push("negative-improvement(weak-attack)".to_string());
    }
    if s.low_confidence_t {
        flags.push("low-confidence-t".to_string());
    }
    if s.undefined_percent_increase {
        flags.push("undefined-percent-increase".to_string());
    }
    flags
}
