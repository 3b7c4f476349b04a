//! Denoising-autoencoder defense trained on an ensemble of simulated
//! attack noise, plus the test-time filtering pass.

use crate::attacks::{generate_attack_suite, AdversarialBatch, AttackConfig};
use crate::datasets::{Images, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{
    build_model, presets::insert_conv_sequence, train_autoencoder, Activation, EpochStats,
    LayerSpec, Model, ModelSpec, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Assembled ensembles larger than this are rejected up front.
const MAX_ENSEMBLE_BYTES: usize = 8 << 30;

/// FC-784-256-128-81-128-256-784; hidden layers carry no activation, the
/// output layer is sigmoid.
pub fn mnist_dae() -> ModelSpec {
    let dense = |units| LayerSpec::Dense { units };
    ModelSpec {
        name: "mnist-dae".into(),
        input_shape: vec![28, 28, 1],
        layers: vec![
            LayerSpec::Flatten,
            dense(256),
            dense(128),
            dense(81),
            dense(128),
            dense(256),
            dense(784),
            LayerSpec::Activation {
                activation: Activation::Sigmoid,
            },
        ],
    }
}

/// Convolutional CIFAR-10 autoencoder. The published table ends in a
/// 64-filter layer, which cannot reconstruct a 3-channel image; the final
/// convolution here emits 3 channels so output shape equals input shape.
pub fn cifar_dae() -> ModelSpec {
    let conv = |filters| LayerSpec::Conv { filters, kernel: 3 };
    let act = |activation| LayerSpec::Activation { activation };
    ModelSpec {
        name: "cifar-dae".into(),
        input_shape: vec![32, 32, 3],
        layers: vec![
            conv(64),
            act(Activation::Relu),
            conv(32),
            act(Activation::Relu),
            LayerSpec::MaxPool,
            conv(3),
            act(Activation::Relu),
            conv(32),
            act(Activation::Relu),
            LayerSpec::Upsample,
            conv(64),
            act(Activation::Relu),
            conv(3),
            act(Activation::Sigmoid),
        ],
    }
}

pub fn dae_preset(name: &str) -> Option<ModelSpec> {
    match name {
        "mnist-dae" => Some(mnist_dae()),
        "cifar-dae" => Some(cifar_dae()),
        _ => None,
    }
}

/// Reconstruction contract: element counts match end to end and the
/// output squashes into (0,1).
pub fn validate_dae_spec(spec: &ModelSpec) -> Result<()> {
    let out = spec.output_shape()?;
    let out_len: usize = out.iter().product();
    let in_len: usize = spec.input_shape.iter().product();
    if out_len != in_len {
        return Err(Error::Spec {
            layer: spec.layers.len().saturating_sub(1),
            message: format!("DAE reconstructs {out_len} values for {in_len} inputs"),
        });
    }
    match spec.layers.last() {
        Some(LayerSpec::Activation {
            activation: Activation::Sigmoid,
        }) => Ok(()),
        other => Err(Error::Spec {
            layer: spec.layers.len().saturating_sub(1),
            message: format!("DAE must end in sigmoid, found {other:?}"),
        }),
    }
}

/// Everything needed to train one ensemble defense: the attack list (the
/// noise-source model list is passed alongside), the DAE architecture and
/// its training parameters, and the shared shuffle seed.
#[derive(Clone, Debug)]
pub struct DefenseEnsembleConfig {
    pub attacks: Vec<AttackConfig>,
    pub dae_spec: ModelSpec,
    pub train: TrainConfig,
    pub shuffle_seed: u64,
    pub dae_seed: u64,
}

/// Build the shuffled (input, target) pair set: inputs are the clean
/// images followed by every adversarial batch, targets are the clean
/// images replicated to match, and one shared permutation keeps the
/// pairing aligned.
pub fn assemble_dae_training_set(
    x_train: &Images,
    batches: &[AdversarialBatch],
    shuffle_seed: u64,
) -> Result<(Images, Images)> {
    let n = x_train.count();
    if n == 0 {
        return Err(Error::Contract("empty clean training set".into()));
    }
    if batches.is_empty() {
        return Err(Error::Contract("no adversarial batches".into()));
    }
    let mut parts: Vec<&Images> = vec![x_train];
    for b in batches {
        if b.clean.count() != n || b.clean.sample_shape() != x_train.sample_shape() {
            return Err(Error::Shape(format!(
                "batch from {} covers {} samples, clean set has {n}",
                b.source_model,
                b.clean.count()
            )));
        }
        parts.push(&b.perturbed);
    }
    let adv_total = n * batches.len();
    // Replication count (len(x_adv)/len(x_train)) + 1 is exact only when
    // every batch covers the full training set.
    if adv_total % n != 0 {
        return Err(Error::Contract(
            "adversarial pool is not a whole multiple of the training set".into(),
        ));
    }
    let total = n + adv_total;
    let bytes = total
        .checked_mul(x_train.sample_len())
        .and_then(|e| e.checked_mul(8 * 2))
        .ok_or_else(|| Error::Config("ensemble size overflows".into()))?;
    if bytes > MAX_ENSEMBLE_BYTES {
        return Err(Error::Config(format!(
            "ensemble of {total} pairs needs ~{} MiB, above the {} MiB cap",
            bytes >> 20,
            MAX_ENSEMBLE_BYTES >> 20
        )));
    }
    let inputs = Images::concat(&parts)?;
    let replication = adv_total / n + 1;
    let target_parts: Vec<&Images> = std::iter::repeat(x_train).take(replication).collect();
    let targets = Images::concat(&target_parts)?;
    debug_assert_eq!(inputs.count(), targets.count());

    let mut perm: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(shuffle_seed);
    perm.shuffle(&mut rng);
    Ok((inputs.select(&perm), targets.select(&perm)))
}

/// Train a DAE on precomputed adversarial batches.
pub fn train_dae_on_batches(
    x_train: &Images,
    batches: &[AdversarialBatch],
    cfg: &DefenseEnsembleConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    validate_dae_spec(&cfg.dae_spec)?;
    let (inputs, targets) = assemble_dae_training_set(x_train, batches, cfg.shuffle_seed)?;
    let mut dae = build_model(&cfg.dae_spec, cfg.dae_seed)?;
    let history = train_autoencoder(&mut dae, &inputs, &targets, &cfg.train)?;
    Ok((dae, history))
}

/// Full ensemble generator: attack the training set with every
/// (algorithm, model) pair, then train the DAE to reconstruct clean
/// targets through one shared shuffle.
pub fn dae_generator(
    data: &LabeledDataset,
    models: &[&Model],
    cfg: &DefenseEnsembleConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    if cfg.attacks.is_empty() {
        return Err(Error::Contract("defense ensemble with no attacks".into()));
    }
    let batches = generate_attack_suite(models, &cfg.attacks, &data.images, &data.labels)?;
    train_dae_on_batches(&data.images, &batches, cfg)
}

/// Forward-propagate test data through the trained DAE (infer mode) and
/// reshape the reconstruction to image layout.
pub fn test_time_defense(dae: &Model, x: &Images) -> Result<Images> {
    let in_len: usize = dae.spec.input_shape.iter().product();
    if x.sample_len() != in_len {
        return Err(Error::Shape(format!(
            "DAE consumes {in_len}-value samples, images carry {}",
            x.sample_len()
        )));
    }
    let mut out = Images::zeros(x.shape);
    let chunk = 512;
    let mut start = 0;
    while start < x.count() {
        let end = (start + chunk).min(x.count());
        let idx: Vec<usize> = (start..end).collect();
        let rec = dae.predict(&x.select(&idx))?;
        out.data[start * x.sample_len()..end * x.sample_len()].copy_from_slice(&rec);
        start = end;
    }
    Ok(out)
}

/// Role of an architecture variant in the CIFAR experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantRole {
    /// Used only to train the defense, never to attack it.
    DefenseTraining,
    Adversary,
}

#[derive(Clone, Debug)]
pub struct CifarVariant {
    pub spec: ModelSpec,
    pub role: VariantRole,
    pub inserted_after: usize,
    pub filters: usize,
}

/// Derive the defense-training variants (extra conv-ELU-batchnorm
/// sequence after the 2nd, 4th, or 6th existing sequence) and the
/// adversary variant (after the 8th) from the base victim architecture.
pub fn build_cifar_variants(base: &ModelSpec) -> Result<Vec<CifarVariant>> {
    let filters: Vec<usize> = base
        .layers
        .windows(3)
        .filter_map(|w| match (&w[0], &w[1], &w[2]) {
            (
                LayerSpec::Conv { filters, .. },
                LayerSpec::Activation {
                    activation: Activation::Elu,
                },
                LayerSpec::BatchNorm,
            ) => Some(*filters),
            _ => None,
        })
        .collect();
    if filters != [32, 32, 64, 64, 128, 128, 128, 128] {
        return Err(Error::Spec {
            layer: 0,
            message: format!(
                "base must be the victim stack of 8 conv-ELU-batchnorm sequences, found filters {filters:?}"
            ),
        });
    }
    let prefix = base.name.strip_suffix("-victim").unwrap_or(&base.name);
    let mut variants = Vec::new();
    for after in [2usize, 4, 6] {
        let name = format!("{prefix}-variant-{after}");
        let spec = insert_conv_sequence(base, after, name).ok_or_else(|| Error::Spec {
            layer: 0,
            message: format!("no sequence {after} to insert after"),
        })?;
        variants.push(CifarVariant {
            spec,
            role: VariantRole::DefenseTraining,
            inserted_after: after,
            filters: filters[after - 1],
        });
    }
    let adv_spec =
        insert_conv_sequence(base, 8, format!("{prefix}-adversary")).ok_or_else(|| Error::Spec {
            layer: 0,
            message: "no eighth sequence to insert after".into(),
        })?;
    variants.push(CifarVariant {
        spec: adv_spec,
        role: VariantRole::Adversary,
        inserted_after: 8,
        filters: filters[7],
    });
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackConfig, CwConfig, DeepFoolConfig, FgsConfig};
    use crate::datasets::make_synthetic;
    use crate::nn::{presets, train, OptimizerKind, TrainLoss};

    fn quick_model(spec: &ModelSpec, data: &LabeledDataset, seed: u64) -> Model {
        let mut model = build_model(spec, seed).unwrap();
        let cfg = TrainConfig {
            loss: TrainLoss::CategoricalCrossentropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 25,
            epochs: 2,
            seed,
            augment: None,
        };
        train(&mut model, data, &cfg).unwrap();
        model
    }

    fn dae_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            loss: TrainLoss::Mse,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 32,
            epochs,
            seed: 11,
            augment: None,
        }
    }

    #[test]
    fn ensemble_set_is_seven_n_with_preserved_pairing() {
        let data = make_synthetic(20, 1).unwrap();
        let m1 = quick_model(&presets::mnist_fc_victim(), &data, 1);
        let m2 = quick_model(&presets::mnist_fc_adversary(), &data, 2);
        let algos = vec![
            AttackConfig::Fgs(FgsConfig {
                epsilon: 2.5,
                clip: false,
            }),
            AttackConfig::DeepFool(DeepFoolConfig {
                max_iterations: 5,
                ..Default::default()
            }),
            AttackConfig::Cw(CwConfig {
                binary_search_steps: 1,
                max_iterations: 3,
                learning_rate: 0.2,
                batch_size: 8,
                initial_constant: 2.0,
                abort_early: true,
                random_starts: 1,
                seed: 0,
            }),
        ];
        let batches =
            generate_attack_suite(&[&m1, &m2], &algos, &data.images, &data.labels).unwrap();
        assert_eq!(batches.len(), 6);
        let (inputs, targets) = assemble_dae_training_set(&data.images, &batches, 99).unwrap();
        let n = data.len();
        assert_eq!(inputs.count(), 7 * n);
        assert_eq!(targets.count(), 7 * n);

        // Every target must be the clean original of its input: the input
        // is either that clean image itself or a perturbation of it from
        // one of the batches.
        for i in 0..inputs.count() {
            let target = targets.sample(i);
            let clean_idx = (0..n)
                .find(|&j| data.images.sample(j) == target)
                .expect("target is a clean training image");
            let input = inputs.sample(i);
            let matches_clean = input == target;
            let matches_some_batch = batches
                .iter()
                .any(|b| b.perturbed.sample(clean_idx) == input);
            assert!(matches_clean || matches_some_batch, "pair {i} broken");
        }
    }

    #[test]
    fn replication_divisibility_guard() {
        let data = make_synthetic(20, 1).unwrap();
        let m1 = quick_model(&presets::mnist_fc_victim(), &data, 1);
        let fgs = AttackConfig::Fgs(FgsConfig {
            epsilon: 1.0,
            clip: false,
        });
        let mut batches =
            generate_attack_suite(&[&m1], &[fgs], &data.images, &data.labels).unwrap();
        // Corrupt the batch to cover fewer samples than the training set.
        let idx: Vec<usize> = (0..10).collect();
        batches[0].clean = batches[0].clean.select(&idx);
        batches[0].perturbed = batches[0].perturbed.select(&idx);
        assert!(assemble_dae_training_set(&data.images, &batches, 1).is_err());
    }

    #[test]
    fn degenerate_single_ensemble_equals_single_attack_dae() {
        let data = make_synthetic(30, 2).unwrap();
        let model = quick_model(&presets::mnist_fc_victim(), &data, 3);
        let cfg = DefenseEnsembleConfig {
            attacks: vec![AttackConfig::Fgs(FgsConfig {
                epsilon: 2.5,
                clip: false,
            })],
            dae_spec: mnist_dae(),
            train: dae_train_cfg(2),
            shuffle_seed: 5,
            dae_seed: 6,
        };
        let (via_generator, _) = dae_generator(&data, &[&model], &cfg).unwrap();
        let batches =
            generate_attack_suite(&[&model], &cfg.attacks, &data.images, &data.labels).unwrap();
        let (via_batches, _) = train_dae_on_batches(&data.images, &batches, &cfg).unwrap();
        assert_eq!(via_generator.params, via_batches.params);
    }

    #[test]
    fn dae_training_loss_decreases() {
        let data = make_synthetic(40, 3).unwrap();
        let model = quick_model(&presets::mnist_fc_victim(), &data, 4);
        let cfg = DefenseEnsembleConfig {
            attacks: vec![AttackConfig::Fgs(FgsConfig {
                epsilon: 2.5,
                clip: false,
            })],
            dae_spec: mnist_dae(),
            train: dae_train_cfg(4),
            shuffle_seed: 1,
            dae_seed: 2,
        };
        let (_, history) = dae_generator(&data, &[&model], &cfg).unwrap();
        assert!(history.last().unwrap().loss < history[0].loss);
    }

    #[test]
    fn defense_output_in_open_interval_and_shape_stable() {
        let data = make_synthetic(20, 4).unwrap();
        let dae = build_model(&mnist_dae(), 7).unwrap();
        let rec = test_time_defense(&dae, &data.images).unwrap();
        assert_eq!(rec.shape, data.images.shape);
        assert!(rec.data.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        // Applying the defense twice is well-defined.
        let rec2 = test_time_defense(&dae, &rec).unwrap();
        assert_eq!(rec2.shape, rec.shape);

        let zeros = Images::zeros([3, 28, 28, 1]);
        let rec0 = test_time_defense(&dae, &zeros).unwrap();
        assert!(rec0.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dae_presets_validate() {
        validate_dae_spec(&mnist_dae()).unwrap();
        validate_dae_spec(&cifar_dae()).unwrap();
        assert!(validate_dae_spec(&presets::mnist_fc_victim()).is_err());
    }

    #[test]
    fn cifar_variants_follow_insertion_rules() {
        let base = presets::cifar_cnn_victim();
        let variants = build_cifar_variants(&base).unwrap();
        assert_eq!(variants.len(), 4);
        assert_eq!(variants[0].filters, 32); // after sequence 2
        assert_eq!(variants[1].filters, 64); // after sequence 4
        assert_eq!(variants[2].filters, 128); // after sequence 6
        assert_eq!(variants[3].filters, 128); // adversary, after sequence 8
        assert_eq!(variants[3].role, VariantRole::Adversary);
        for v in &variants {
            assert_eq!(v.spec.layers.len(), base.layers.len() + 3, "{}", v.spec.name);
            v.spec.validate().unwrap();
            if v.role == VariantRole::DefenseTraining {
                assert!(v.spec.name.contains("variant"));
            }
        }
        // Inserted conv carries the preceding sequence's filter count.
        let v2 = &variants[0].spec;
        let convs: Vec<usize> = v2
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![32, 32, 32, 64, 64, 128, 128, 128, 128]);
    }

    #[test]
    fn cifar_variants_reject_foreign_base() {
        assert!(build_cifar_variants(&presets::mnist_cnn_adversary()).is_err());
    }
}
