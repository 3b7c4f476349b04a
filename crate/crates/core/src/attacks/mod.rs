//! Untargeted gradient-based evasion attacks: FGS, DeepFool, and CW.

mod cw;
mod deepfool;
mod fgs;

pub use cw::cw_attack;
pub use deepfool::deepfool_attack;
pub use fgs::fgs_attack;

use crate::datasets::Images;
use crate::error::{Error, Result};
use crate::nn::Model;
use serde::{Deserialize, Serialize};

/// Gradient threshold below which a sample is treated as degenerate
/// (zero attack direction) rather than failing the whole batch.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackAlgorithm {
    Fgs,
    #[serde(rename = "deepfool")]
    DeepFool,
    Cw,
}

impl std::fmt::Display for AttackAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackAlgorithm::Fgs => write!(f, "fgs"),
            AttackAlgorithm::DeepFool => write!(f, "deepfool"),
            AttackAlgorithm::Cw => write!(f, "cw"),
        }
    }
}

/// Fast gradient sign configuration. The perturbation is the l2-normalized
/// loss gradient scaled to `epsilon`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgsConfig {
    pub epsilon: f64,
    /// Clamp the result to [0,1]; off by default so the achieved norm
    /// stays exactly epsilon.
    #[serde(default)]
    pub clip: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepFoolConfig {
    pub max_iterations: usize,
    /// Final perturbation is scaled by (1 + overshoot) to push past the
    /// linearized boundary.
    pub overshoot: f64,
    /// Use ||w'||_2 instead of ||w'||_2^2 in the class-selection ratio.
    #[serde(default)]
    pub canonical_ratio: bool,
    #[serde(default)]
    pub clip: bool,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig {
            max_iterations: 50,
            overshoot: 0.02,
            canonical_ratio: false,
            clip: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Samples per parallel work chunk; grouping only, results do not
    /// depend on it.
    pub batch_size: usize,
    pub initial_constant: f64,
    pub abort_early: bool,
    pub random_starts: usize,
    /// Random-start noise seed; experiment configs may omit it and let
    /// the pipeline derive one from the global seed.
    #[serde(default)]
    pub seed: u64,
}

impl CwConfig {
    /// MNIST settings: 4 binary search steps, 60 iterations, lr 0.1,
    /// batch 10, initial constant 1.0, abort early.
    pub fn mnist() -> Self {
        CwConfig {
            binary_search_steps: 4,
            max_iterations: 60,
            learning_rate: 0.1,
            batch_size: 10,
            initial_constant: 1.0,
            abort_early: true,
            random_starts: 3,
            seed: 0,
        }
    }

    /// CIFAR-10 settings: 6 binary search steps, 10000 iterations,
    /// lr 0.7, batch 25, initial constant 0.001, abort early.
    pub fn cifar() -> Self {
        CwConfig {
            binary_search_steps: 6,
            max_iterations: 10_000,
            learning_rate: 0.7,
            batch_size: 25,
            initial_constant: 0.001,
            abort_early: true,
            random_starts: 3,
            seed: 0,
        }
    }

    /// Reduced budget for desk-scale ensemble generation.
    pub fn desk() -> Self {
        CwConfig {
            binary_search_steps: 3,
            max_iterations: 30,
            learning_rate: 0.2,
            batch_size: 16,
            initial_constant: 1.0,
            abort_early: true,
            random_starts: 2,
            seed: 0,
        }
    }
}

/// Algorithm selection plus hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackConfig {
    Fgs(FgsConfig),
    #[serde(rename = "deepfool")]
    DeepFool(DeepFoolConfig),
    Cw(CwConfig),
}

impl AttackConfig {
    pub fn algorithm(&self) -> AttackAlgorithm {
        match self {
            AttackConfig::Fgs(_) => AttackAlgorithm::Fgs,
            AttackConfig::DeepFool(_) => AttackAlgorithm::DeepFool,
            AttackConfig::Cw(_) => AttackAlgorithm::Cw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackConfig::Fgs(c) => {
                if c.epsilon <= 0.0 {
                    return Err(Error::Config("fgs epsilon must be positive".into()));
                }
            }
            AttackConfig::DeepFool(c) => {
                if c.max_iterations == 0 {
                    return Err(Error::Config("deepfool needs at least 1 iteration".into()));
                }
                if c.overshoot < 0.0 {
                    return Err(Error::Config("negative deepfool overshoot".into()));
                }
            }
            AttackConfig::Cw(c) => {
                if c.binary_search_steps == 0 {
                    return Err(Error::Config("cw needs at least 1 binary search step".into()));
                }
                if c.max_iterations == 0 {
                    return Err(Error::Config("cw needs at least 1 iteration".into()));
                }
                if c.initial_constant <= 0.0 {
                    return Err(Error::Config("cw initial constant must be positive".into()));
                }
                if c.learning_rate <= 0.0 {
                    return Err(Error::Config("cw learning rate must be positive".into()));
                }
                if c.random_starts == 0 {
                    return Err(Error::Config("cw needs at least 1 start".into()));
                }
                if c.batch_size == 0 {
                    return Err(Error::Config("cw batch size must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// One probed penalty constant and whether its descent found a
/// zero-surrogate solution.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CwProbe {
    pub c: f64,
    pub success: bool,
}

/// Paired clean/perturbed samples with provenance.
#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    pub clean: Images,
    pub perturbed: Images,
    pub labels: Vec<u8>,
    pub source_model: String,
    pub algorithm: AttackAlgorithm,
    /// Per-sample achieved l2 perturbation norms.
    pub norms: Vec<f64>,
    /// Misclassified by the source model (per-attack semantics: FGS/CW
    /// judge against the true label, DeepFool against its reference
    /// label).
    pub success: Vec<bool>,
    /// Samples where the attack direction degenerated (zero gradient or
    /// non-finite descent).
    pub degenerate: Vec<bool>,
    /// Iterations spent per sample.
    pub iterations: Vec<usize>,
    /// CW: smallest probed constant that succeeded, per sample.
    pub reported_c: Vec<Option<f64>>,
    /// CW: full probe log, per sample.
    pub probe_log: Vec<Vec<CwProbe>>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.clean.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recompute per-sample l2 norms from the stored image pairs.
    pub fn recompute_norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.clean
                    .sample(i)
                    .iter()
                    .zip(self.perturbed.sample(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Attack every model with every algorithm: one batch per
/// (algorithm, model) pair, algorithms-major order.
pub fn generate_attack_suite(
    models: &[&Model],
    algorithms: &[AttackConfig],
    x: &Images,
    y: &[u8],
) -> Result<Vec<AdversarialBatch>> {
    if models.is_empty() {
        return Err(Error::Contract("attack suite with no models".into()));
    }
    if algorithms.is_empty() {
        return Err(Error::Contract("attack suite with no algorithms".into()));
    }
    let mut batches = Vec::with_capacity(models.len() * algorithms.len());
    for cfg in algorithms {
        for model in models {
            let batch = run_attack(model, cfg, x, y).map_err(|e| {
                e.in_stage(&format!("{} x {}", cfg.algorithm(), model.spec.name))
            })?;
            batches.push(batch);
        }
    }
    Ok(batches)
}

/// Dispatch one attack configuration against one model.
pub fn run_attack(model: &Model, cfg: &AttackConfig, x: &Images, y: &[u8]) -> Result<AdversarialBatch> {
    match cfg {
        AttackConfig::Fgs(c) => fgs_attack(model, x, y, c),
        AttackConfig::DeepFool(c) => deepfool_attack(model, x, Some(y), c),
        AttackConfig::Cw(c) => cw_attack(model, x, y, c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic;
    use crate::nn::{build_model, presets};

    #[test]
    fn suite_shape_three_by_two() {
        let ds = make_synthetic(10, 1).unwrap();
        let m1 = build_model(&presets::mnist_fc_victim(), 1).unwrap();
        let m2 = build_model(&presets::mnist_fc_adversary(), 2).unwrap();
        let algos = vec![
            AttackConfig::Fgs(FgsConfig {
                epsilon: 1.0,
                clip: false,
            }),
            AttackConfig::DeepFool(DeepFoolConfig {
                max_iterations: 3,
                ..Default::default()
            }),
            AttackConfig::Cw(CwConfig {
                binary_search_steps: 1,
                max_iterations: 2,
                learning_rate: 0.1,
                batch_size: 4,
                initial_constant: 1.0,
                abort_early: true,
                random_starts: 1,
                seed: 0,
            }),
        ];
        let batches =
            generate_attack_suite(&[&m1, &m2], &algos, &ds.images, &ds.labels).unwrap();
        assert_eq!(batches.len(), 6);
        // algorithms-major order
        assert_eq!(batches[0].algorithm, AttackAlgorithm::Fgs);
        assert_eq!(batches[0].source_model, "mnist-fc-victim");
        assert_eq!(batches[1].source_model, "mnist-fc-adversary");
        assert_eq!(batches[2].algorithm, AttackAlgorithm::DeepFool);
        assert_eq!(batches[4].algorithm, AttackAlgorithm::Cw);
    }

    #[test]
    fn empty_model_list_rejected() {
        let ds = make_synthetic(10, 1).unwrap();
        let algos = vec![AttackConfig::Fgs(FgsConfig {
            epsilon: 1.0,
            clip: false,
        })];
        assert!(generate_attack_suite(&[], &algos, &ds.images, &ds.labels).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::Fgs(FgsConfig {
            epsilon: 0.0,
            clip: false
        })
        .validate()
        .is_err());
        assert!(AttackConfig::Cw(CwConfig {
            initial_constant: 0.0,
            ..CwConfig::mnist()
        })
        .validate()
        .is_err());
        assert!(AttackConfig::Cw(CwConfig::mnist()).validate().is_ok());
    }
}
