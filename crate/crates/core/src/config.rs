//! Experiment configuration: a JSON document naming datasets, models,
//! attacks, defenses, and scenarios. Schema-validated before any work
//! starts; unknown keys are rejected.

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::evaluation::VaryAxis;
use crate::nn::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetSource {
    /// Procedural digit glyphs; no files needed.
    Synthetic { n_train: usize, n_test: usize },
    /// MNIST IDX files laid out as train-images-idx3-ubyte etc.
    Mnist { dir: PathBuf },
    /// CIFAR-10 binary batches.
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Take the first N training samples after loading.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    /// Classifier preset name (see the nn presets).
    pub preset: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub name: String,
    pub config: AttackConfig,
}

/// (attack, model) pair used as a noise source or a scenario attacker.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRef {
    pub attack: String,
    pub model: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseEntryConfig {
    pub name: String,
    /// DAE preset name: mnist-dae or cifar-dae.
    pub dae: String,
    pub sources: Vec<SourceRef>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub name: String,
    pub vary: VaryAxis,
    /// None = no-attack scenario.
    #[serde(default)]
    pub attacker: Option<SourceRef>,
    /// Attack under study for no-attack vary-architecture scenarios.
    #[serde(default)]
    pub study_attack: Option<String>,
    pub victim: String,
    /// Name of the proposed (ensemble-trained) defense.
    pub proposed: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; every stage seed derives from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub defenses: Vec<DefenseEntryConfig>,
    #[serde(default)]
    pub scenarios: Vec<ScenarioEntry>,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Structural validation: unique names, resolvable references,
    /// composable presets, legal hyperparameters.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if !names.insert(&m.name) {
                return Err(Error::Config(format!("duplicate model name '{}'", m.name)));
            }
            if crate::nn::presets::classifier_preset(&m.preset).is_none() {
                return Err(Error::Config(format!(
                    "model '{}': unknown preset '{}'",
                    m.name, m.preset
                )));
            }
            m.train.validate()?;
        }
        let mut attack_names = BTreeSet::new();
        for a in &self.attacks {
            if !attack_names.insert(&a.name) {
                return Err(Error::Config(format!("duplicate attack name '{}'", a.name)));
            }
            a.config.validate()?;
        }
        let model_names: BTreeSet<&String> = self.models.iter().map(|m| &m.name).collect();
        let attack_set: BTreeSet<&String> = self.attacks.iter().map(|a| &a.name).collect();
        let resolve = |s: &SourceRef, ctx: &str| -> Result<()> {
            if !attack_set.contains(&s.attack) {
                return Err(Error::Config(format!("{ctx}: unknown attack '{}'", s.attack)));
            }
            if !model_names.contains(&s.model) {
                return Err(Error::Config(format!("{ctx}: unknown model '{}'", s.model)));
            }
            Ok(())
        };
        let mut defense_names = BTreeSet::new();
        for d in &self.defenses {
            if !defense_names.insert(&d.name) {
                return Err(Error::Config(format!("duplicate defense name '{}'", d.name)));
            }
            if crate::defense::dae_preset(&d.dae).is_none() {
                return Err(Error::Config(format!(
                    "defense '{}': unknown DAE preset '{}'",
                    d.name, d.dae
                )));
            }
            if d.sources.is_empty() {
                return Err(Error::Config(format!("defense '{}' has no sources", d.name)));
            }
            for s in &d.sources {
                resolve(s, &format!("defense '{}'", d.name))?;
            }
            d.train.validate()?;
        }
        let mut scenario_names = BTreeSet::new();
        for s in &self.scenarios {
            if !scenario_names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate scenario name '{}'", s.name)));
            }
            if !model_names.contains(&s.victim) {
                return Err(Error::Config(format!(
                    "scenario '{}': unknown victim '{}'",
                    s.name, s.victim
                )));
            }
            if !defense_names.contains(&s.proposed) {
                return Err(Error::Config(format!(
                    "scenario '{}': unknown defense '{}'",
                    s.name, s.proposed
                )));
            }
            if let Some(att) = &s.attacker {
                resolve(att, &format!("scenario '{}'", s.name))?;
            }
            if let Some(study) = &s.study_attack {
                if !attack_set.contains(study) {
                    return Err(Error::Config(format!(
                        "scenario '{}': unknown study attack '{}'",
                        s.name, study
                    )));
                }
            }
            if s.attacker.is_none()
                && s.study_attack.is_none()
                && s.vary == VaryAxis::Architecture
            {
                return Err(Error::Config(format!(
                    "scenario '{}': no-attack vary-architecture scenarios need study_attack",
                    s.name
                )));
            }
        }
        match &self.dataset.source {
            DatasetSource::Synthetic { n_train, n_test } => {
                if *n_train < 10 || *n_test < 10 {
                    return Err(Error::Config("synthetic splits need at least 10 samples".into()));
                }
            }
            DatasetSource::Cifar10 { train_files, .. } => {
                if train_files.is_empty() {
                    return Err(Error::Config("cifar10 needs at least one train file".into()));
                }
            }
            DatasetSource::Mnist { .. } => {}
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn attack(&self, name: &str) -> Option<&AttackEntry> {
        self.attacks.iter().find(|a| a.name == name)
    }

    pub fn defense(&self, name: &str) -> Option<&DefenseEntryConfig> {
        self.defenses.iter().find(|d| d.name == name)
    }
}
