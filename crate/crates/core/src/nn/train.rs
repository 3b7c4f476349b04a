//! Mini-batch training loops for classifiers and autoencoders.

use super::{LayerParams, Model, ParamSlot};
use crate::autodiff::{Graph, LossKind, Mode, Tensor, BATCHNORM_MOMENTUM};
use crate::datasets::{augment, AugmentConfig, Images, LabeledDataset};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    CategoricalCrossentropy,
    Mse,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: TrainLoss,
    pub optimizer: super::OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Batch shuffling and dropout seed. Experiment configs may omit it;
    /// the pipeline derives one from the global seed.
    #[serde(default)]
    pub seed: u64,
    /// Fresh draws each epoch when set; the stored dataset stays clean.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Train a classifier; labels become one-hot targets. Returns per-epoch
/// loss/accuracy history of length `cfg.epochs`.
pub fn train(model: &mut Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let classes = model.output_classes()?;
    if classes < 2 {
        return Err(Error::Config("classifier needs at least 2 output classes".into()));
    }
    run_epochs(model, cfg, data.len(), |epoch| {
        let epoch_data = match &cfg.augment {
            Some(aug) => {
                let per_epoch = AugmentConfig {
                    seed: mix(aug.seed, epoch as u64),
                    ..*aug
                };
                std::borrow::Cow::Owned(augment(data, &per_epoch)?)
            }
            None => std::borrow::Cow::Borrowed(data),
        };
        Ok(move |indices: &[usize], graph: &mut Graph| {
            let batch = epoch_data.images.select(indices);
            let shape: Vec<usize> = batch.shape.to_vec();
            let x = graph.input(&shape, batch.data)?;
            let mut onehot = vec![0.0; indices.len() * classes];
            for (r, &i) in indices.iter().enumerate() {
                onehot[r * classes + epoch_data.labels[i] as usize] = 1.0;
            }
            let target = graph.input(&[indices.len(), classes], onehot)?;
            let labels: Vec<u8> = indices.iter().map(|&i| epoch_data.labels[i]).collect();
            Ok((x, target, Some(labels)))
        })
    })
}

/// Train an autoencoder with per-pixel MSE against explicit targets
/// (same count and sample size as the inputs).
pub fn train_autoencoder(
    model: &mut Model,
    inputs: &Images,
    targets: &Images,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if cfg.loss != TrainLoss::Mse {
        return Err(Error::Config("autoencoder training uses the mse loss".into()));
    }
    if inputs.count() == 0 {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    if inputs.count() != targets.count() || inputs.sample_len() != targets.sample_len() {
        return Err(Error::Shape(format!(
            "inputs {:?} vs targets {:?}",
            inputs.shape, targets.shape
        )));
    }
    let out_shape = model.spec.output_shape()?;
    let out_len: usize = out_shape.iter().product();
    if out_len != inputs.sample_len() {
        return Err(Error::Shape(format!(
            "model reconstructs {out_len} values per sample, images have {}",
            inputs.sample_len()
        )));
    }
    run_epochs(model, cfg, inputs.count(), |_epoch| {
        let out_shape = out_shape.clone();
        Ok(move |indices: &[usize], graph: &mut Graph| {
            let batch = inputs.select(indices);
            let shape: Vec<usize> = batch.shape.to_vec();
            let x = graph.input(&shape, batch.data)?;
            // Target shaped like the model output (flat for FC DAEs).
            let t_batch = targets.select(indices);
            let t_shape: Vec<usize> = std::iter::once(indices.len())
                .chain(out_shape.iter().copied())
                .collect();
            let target = graph.input(&t_shape, t_batch.data)?;
            Ok((x, target, None))
        })
    })
}

/// Shared epoch/batch loop. `make_batcher` returns, per epoch, a closure
/// producing `(input, target, labels)` graph nodes for a batch.
fn run_epochs<'a, MB, B>(
    model: &mut Model,
    cfg: &TrainConfig,
    n: usize,
    mut make_batcher: MB,
) -> Result<Vec<EpochStats>>
where
    MB: FnMut(usize) -> Result<B>,
    B: Fn(&[usize], &mut Graph) -> Result<(Tensor, Tensor, Option<Vec<u8>>)> + 'a,
{
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut optimizer = super::Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let loss_kind = match cfg.loss {
        TrainLoss::CategoricalCrossentropy => LossKind::CategoricalCrossentropy,
        TrainLoss::Mse => LossKind::Mse,
    };
    for epoch in 0..cfg.epochs {
        let batcher = make_batcher(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut scored = 0usize;
        for (batch_idx, indices) in order.chunks(cfg.batch_size).enumerate() {
            let mut graph = Graph::new(Mode::Train, mix(mix(cfg.seed, epoch as u64), batch_idx as u64));
            let step = (|| -> Result<f64> {
                let (x, target, labels) = batcher(indices, &mut graph)?;
                let pass = model.forward_on(&mut graph, &x)?;
                let loss = graph.loss(loss_kind.clone(), &pass.output, Some(&target))?;
                graph.backward(&loss)?;
                if let Some(labels) = labels {
                    let classes = *pass.output.shape.last().unwrap();
                    let preds = super::argmax_rows(graph.values(&pass.output), classes);
                    correct += preds
                        .iter()
                        .zip(&labels)
                        .filter(|(p, l)| **p == **l as usize)
                        .count();
                    scored += labels.len();
                }
                apply_gradients(model, &graph, &pass, &mut optimizer)?;
                update_running_stats(model, &graph, &pass);
                Ok(graph.values(&loss)[0])
            })();
            match step {
                Ok(loss) => epoch_loss += loss * indices.len() as f64,
                Err(Error::Overflow(m)) => {
                    return Err(Error::Training {
                        epoch,
                        message: format!("loss diverged: {m}"),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        history.push(EpochStats {
            loss: epoch_loss / n as f64,
            accuracy: if scored > 0 {
                Some(correct as f64 / scored as f64)
            } else {
                None
            },
        });
    }
    Ok(history)
}

fn apply_gradients(
    model: &mut Model,
    graph: &Graph,
    pass: &super::ForwardPass,
    optimizer: &mut super::Optimizer,
) -> Result<()> {
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(pass.params.len());
    for (_, _, t) in &pass.params {
        grads.push(
            graph
                .grad(t)
                .ok_or_else(|| Error::Contract("parameter unreachable from loss".into()))?
                .to_vec(),
        );
    }
    // pass.params is emitted in layer order: walk the model in lockstep.
    let mut updates: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(grads.len());
    let mut cursor = 0;
    for (li, p) in model.params.iter_mut().enumerate() {
        let slots: Vec<(ParamSlot, &mut Vec<f64>)> = match p {
            LayerParams::Dense { w, b } => {
                vec![(ParamSlot::DenseW, w), (ParamSlot::DenseB, b)]
            }
            LayerParams::Conv { k, b } => vec![(ParamSlot::ConvK, k), (ParamSlot::ConvB, b)],
            LayerParams::BatchNorm { gamma, beta, .. } => {
                vec![(ParamSlot::Gamma, gamma), (ParamSlot::Beta, beta)]
            }
            LayerParams::None => vec![],
        };
        for (slot, arr) in slots {
            debug_assert_eq!(pass.params[cursor].0, li);
            debug_assert_eq!(pass.params[cursor].1, slot);
            updates.push((arr.as_mut_slice(), &grads[cursor]));
            cursor += 1;
        }
    }
    debug_assert_eq!(cursor, grads.len());
    optimizer.step(&mut updates);
    Ok(())
}

fn update_running_stats(model: &mut Model, graph: &Graph, pass: &super::ForwardPass) {
    for (li, t) in &pass.bn_nodes {
        if let Some((mean, var)) = graph.batchnorm_stats(t) {
            if let LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut model.params[*li]
            {
                for (r, &m) in running_mean.iter_mut().zip(mean) {
                    *r = BATCHNORM_MOMENTUM * *r + (1.0 - BATCHNORM_MOMENTUM) * m;
                }
                for (r, &v) in running_var.iter_mut().zip(var) {
                    *r = BATCHNORM_MOMENTUM * *r + (1.0 - BATCHNORM_MOMENTUM) * v;
                }
            }
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, evaluate_accuracy, presets};
    use super::*;
    use crate::datasets::{make_synthetic, Provenance};
    use crate::nn::OptimizerKind;

    fn toy_separable() -> LabeledDataset {
        // Two Gaussian-ish blobs on an 8-dim input, trivially separable.
        let n = 200;
        let mut data = vec![0.0; n * 8];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            labels.push(class);
            for j in 0..8 {
                let base = if class == 0 { 0.2 } else { 0.8 };
                // deterministic pseudo-noise
                let noise = (((i * 31 + j * 17) % 10) as f64 - 4.5) / 100.0;
                data[i * 8 + j] = base + noise;
            }
        }
        LabeledDataset::new(
            Images::new([n, 2, 2, 2], data).unwrap(),
            labels,
            Provenance::Synthetic,
        )
        .unwrap()
    }

    fn toy_spec() -> super::super::ModelSpec {
        use super::super::{Activation, LayerSpec, ModelSpec};
        ModelSpec {
            name: "toy".into(),
            input_shape: vec![2, 2, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 16 },
                LayerSpec::Activation {
                    activation: Activation::Relu,
                },
                LayerSpec::Dense { units: 2 },
                LayerSpec::Activation {
                    activation: Activation::Softmax,
                },
            ],
        }
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            loss: TrainLoss::CategoricalCrossentropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            batch_size: 20,
            epochs: 20,
            seed: 5,
            augment: None,
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy_separable();
        let mut model = build_model(&toy_spec(), 1).unwrap();
        let history = train(&mut model, &data, &toy_cfg()).unwrap();
        assert_eq!(history.len(), 20);
        assert!(history.last().unwrap().loss < history[0].loss);
        let acc = evaluate_accuracy(&model, &data).unwrap();
        assert_eq!(acc, 1.0, "training accuracy {acc}");
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = toy_separable();
        let mut model = build_model(&toy_spec(), 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..toy_cfg() };
        assert!(matches!(
            train(&mut model, &data, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = make_synthetic(100, 3).unwrap();
        let run = || {
            let mut model = build_model(&presets::mnist_fc_victim(), 9).unwrap();
            let cfg = TrainConfig {
                loss: TrainLoss::CategoricalCrossentropy,
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.001,
                batch_size: 32,
                epochs: 2,
                seed: 4,
                augment: None,
            };
            let h = train(&mut model, &data, &cfg).unwrap();
            (model.params, h.last().unwrap().loss)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn dropout_and_batchnorm_train_path() {
        use super::super::{Activation, LayerSpec, ModelSpec};
        let spec = ModelSpec {
            name: "bn-toy".into(),
            input_shape: vec![2, 2, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 16 },
                LayerSpec::BatchNorm,
                LayerSpec::Activation {
                    activation: Activation::Relu,
                },
                LayerSpec::Dropout { rate: 0.2 },
                LayerSpec::Dense { units: 2 },
                LayerSpec::Activation {
                    activation: Activation::Softmax,
                },
            ],
        };
        let data = toy_separable();
        let mut model = build_model(&spec, 2).unwrap();
        let history = train(&mut model, &data, &toy_cfg()).unwrap();
        assert!(history.last().unwrap().loss < history[0].loss);
        // Running stats must have moved off their initial values.
        if let LayerParams::BatchNorm { running_mean, .. } = &model.params[2] {
            assert!(running_mean.iter().any(|&m| m != 0.0));
        } else {
            panic!("expected batchnorm params");
        }
    }
}
