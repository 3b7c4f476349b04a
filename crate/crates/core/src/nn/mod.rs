//! Declarative model construction, forward evaluation, and training.

mod optimizer;
pub mod presets;
mod train;

pub use optimizer::{Optimizer, OptimizerKind};
pub use train::{train, train_autoencoder, EpochStats, TrainConfig, TrainLoss};

use crate::autodiff::{Graph, Mode, OpKind, Tensor};
use crate::datasets::{Images, LabeledDataset};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Activation functions addressable from a layer list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Softmax,
    Linear,
}

/// One layer of a model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, kernel: usize },
    MaxPool,
    Upsample,
    Dropout { rate: f64 },
    BatchNorm,
    Flatten,
    Activation { activation: Activation },
}

/// Architecture: an input shape plus an ordered layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample shape, e.g. `[28, 28, 1]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Fully-connected vs convolutional, used by the baseline-selection
/// rules of the evaluation module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchType {
    Fc,
    Cnn,
}

impl ModelSpec {
    pub fn arch_type(&self) -> ArchType {
        if self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. }))
        {
            ArchType::Cnn
        } else {
            ArchType::Fc
        }
    }

    /// Per-sample output shape; errors name the first non-composing layer.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = infer_shape(&shape, layer).map_err(|message| Error::Spec { layer: i, message })?;
        }
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.output_shape().map(|_| ())
    }
}

fn infer_shape(shape: &[usize], layer: &LayerSpec) -> std::result::Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Dense { units } => {
            if shape.len() != 1 {
                return Err(format!("dense needs a flat input, got {shape:?}"));
            }
            if *units == 0 {
                return Err("dense with zero units".into());
            }
            Ok(vec![*units])
        }
        LayerSpec::Conv { filters, kernel } => {
            if shape.len() != 3 {
                return Err(format!("conv needs [h,w,c] input, got {shape:?}"));
            }
            if *filters == 0 || kernel % 2 == 0 {
                return Err(format!("conv with filters {filters}, kernel {kernel}"));
            }
            Ok(vec![shape[0], shape[1], *filters])
        }
        LayerSpec::MaxPool => {
            if shape.len() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
                return Err(format!("maxpool on {shape:?}"));
            }
            Ok(vec![shape[0] / 2, shape[1] / 2, shape[2]])
        }
        LayerSpec::Upsample => {
            if shape.len() != 3 {
                return Err(format!("upsample on {shape:?}"));
            }
            Ok(vec![shape[0] * 2, shape[1] * 2, shape[2]])
        }
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(format!("dropout rate {rate} outside [0,1)"));
            }
            Ok(shape.to_vec())
        }
        LayerSpec::BatchNorm | LayerSpec::Activation { .. } => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// Learned parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Conv {
        k: Vec<f64>,
        b: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

/// A built (possibly trained) model: spec, weights, batchnorm state.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<LayerParams>,
    pub seed: u64,
}

/// Gradient-carrying handles produced by one forward construction.
pub struct ForwardPass {
    pub input: Tensor,
    pub output: Tensor,
    /// Pre-softmax tensor when the model ends in a softmax activation.
    pub logits: Option<Tensor>,
    /// `(layer index, slot, tensor)` for every trainable parameter, in
    /// deterministic layer order.
    pub params: Vec<(usize, ParamSlot, Tensor)>,
    /// `(layer index, batchnorm output tensor)` for running-stat updates.
    pub bn_nodes: Vec<(usize, Tensor)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    DenseW,
    DenseB,
    ConvK,
    ConvB,
    Gamma,
    Beta,
}

/// Build a model with Glorot-uniform weights (zero biases), deterministic
/// per seed.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut shape = spec.input_shape.clone();
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let p = match layer {
            LayerSpec::Dense { units } => {
                let fan_in = shape[0];
                let w = glorot(&mut rng, fan_in, *units, fan_in * units);
                LayerParams::Dense {
                    w,
                    b: vec![0.0; *units],
                }
            }
            LayerSpec::Conv { filters, kernel } => {
                let ci = shape[2];
                let fan_in = kernel * kernel * ci;
                let fan_out = kernel * kernel * filters;
                let k = glorot(&mut rng, fan_in, fan_out, kernel * kernel * ci * filters);
                LayerParams::Conv {
                    k,
                    b: vec![0.0; *filters],
                }
            }
            LayerSpec::BatchNorm => {
                let c = *shape.last().unwrap();
                LayerParams::BatchNorm {
                    gamma: vec![1.0; c],
                    beta: vec![0.0; c],
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                }
            }
            _ => LayerParams::None,
        };
        params.push(p);
        shape = infer_shape(&shape, layer).expect("validated above");
    }
    Ok(Model {
        spec: spec.clone(),
        params,
        seed,
    })
}

fn glorot(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl Model {
    /// Register the model's computation on a graph starting from `x`
    /// (shape `[n, ...input_shape]`).
    pub fn forward_on(&self, graph: &mut Graph, x: &Tensor) -> Result<ForwardPass> {
        let expected: Vec<usize> = std::iter::once(x.shape[0])
            .chain(self.spec.input_shape.iter().copied())
            .collect();
        if x.shape != expected {
            return Err(Error::Shape(format!(
                "model {} expects input {:?}, got {:?}",
                self.spec.name, expected, x.shape
            )));
        }
        let input = x.clone();
        let mut t = x.clone();
        let mut param_nodes = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut logits = None;
        let last = self.spec.layers.len().saturating_sub(1);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match (layer, &self.params[i]) {
                (LayerSpec::Dense { units }, LayerParams::Dense { w, b }) => {
                    let fan_in = t.shape[1];
                    let wt = graph.input(&[fan_in, *units], w.clone())?;
                    let bt = graph.input(&[*units], b.clone())?;
                    let mm = graph.apply(OpKind::Matmul, &[&t, &wt])?;
                    t = graph.apply(OpKind::Add, &[&mm, &bt])?;
                    param_nodes.push((i, ParamSlot::DenseW, wt));
                    param_nodes.push((i, ParamSlot::DenseB, bt));
                }
                (LayerSpec::Conv { filters, kernel }, LayerParams::Conv { k, b }) => {
                    let ci = t.shape[3];
                    let kt = graph.input(&[*kernel, *kernel, ci, *filters], k.clone())?;
                    let bt = graph.input(&[*filters], b.clone())?;
                    let cv = graph.apply(OpKind::Conv2d, &[&t, &kt])?;
                    t = graph.apply(OpKind::Add, &[&cv, &bt])?;
                    param_nodes.push((i, ParamSlot::ConvK, kt));
                    param_nodes.push((i, ParamSlot::ConvB, bt));
                }
                (
                    LayerSpec::BatchNorm,
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let c = *t.shape.last().unwrap();
                    let gt = graph.input(&[c], gamma.clone())?;
                    let bt = graph.input(&[c], beta.clone())?;
                    let rm = graph.input(&[c], running_mean.clone())?;
                    let rv = graph.input(&[c], running_var.clone())?;
                    t = graph.apply(OpKind::Batchnorm, &[&t, &gt, &bt, &rm, &rv])?;
                    param_nodes.push((i, ParamSlot::Gamma, gt));
                    param_nodes.push((i, ParamSlot::Beta, bt));
                    bn_nodes.push((i, t.clone()));
                }
                (LayerSpec::MaxPool, _) => t = graph.apply(OpKind::MaxPool2x2, &[&t])?,
                (LayerSpec::Upsample, _) => t = graph.apply(OpKind::Upsample2x2, &[&t])?,
                (LayerSpec::Dropout { rate }, _) => {
                    t = graph.apply(OpKind::Dropout { rate: *rate }, &[&t])?
                }
                (LayerSpec::Flatten, _) => t = graph.apply(OpKind::Flatten, &[&t])?,
                (LayerSpec::Activation { activation }, _) => {
                    let op = match activation {
                        Activation::Relu => Some(OpKind::Relu),
                        Activation::Elu => Some(OpKind::Elu),
                        Activation::Sigmoid => Some(OpKind::Sigmoid),
                        Activation::Softmax => Some(OpKind::Softmax),
                        Activation::Linear => None,
                    };
                    if *activation == Activation::Softmax && i == last {
                        logits = Some(t.clone());
                    }
                    if let Some(op) = op {
                        t = graph.apply(op, &[&t])?;
                    }
                }
                (spec, params) => {
                    return Err(Error::Contract(format!(
                        "layer {i}: spec {spec:?} does not match stored params {params:?}"
                    )))
                }
            }
        }
        Ok(ForwardPass {
            input,
            output: t,
            logits,
            params: param_nodes,
            bn_nodes,
        })
    }

    /// Infer-mode forward pass over a batch of images; returns the output
    /// values as `[n, ...]` row-major.
    pub fn predict(&self, images: &Images) -> Result<Vec<f64>> {
        let mut graph = Graph::new(Mode::Infer, 0);
        let shape: Vec<usize> = images.shape.to_vec();
        let x = graph.input(&shape, images.data.clone())?;
        let pass = self.forward_on(&mut graph, &x)?;
        Ok(graph.values(&pass.output).to_vec())
    }

    /// Pre-softmax values `Z(x)`; requires the model to end in softmax.
    pub fn predict_logits(&self, images: &Images) -> Result<Vec<f64>> {
        let mut graph = Graph::new(Mode::Infer, 0);
        let shape: Vec<usize> = images.shape.to_vec();
        let x = graph.input(&shape, images.data.clone())?;
        let pass = self.forward_on(&mut graph, &x)?;
        let logits = pass
            .logits
            .ok_or_else(|| Error::Contract("model has no softmax head".into()))?;
        Ok(graph.values(&logits).to_vec())
    }

    /// Number of output classes (size of the last axis of the output).
    pub fn output_classes(&self) -> Result<usize> {
        Ok(*self.spec.output_shape()?.last().unwrap_or(&0))
    }
}

/// Row-wise argmax over `[n, classes]` output values.
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `(correct, total)` over a labeled dataset, infer mode, batched.
pub fn evaluate_counts(model: &Model, data: &LabeledDataset) -> Result<(usize, usize)> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let classes = model.output_classes()?;
    let mut correct = 0;
    let n = data.len();
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = data.images.select(&idx);
        let probs = model.predict(&batch)?;
        for (row, &label) in argmax_rows(&probs, classes).iter().zip(&data.labels[start..end]) {
            if *row == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((correct, n))
}

/// Fraction of argmax-correct predictions in `[0,1]`.
pub fn evaluate_accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    let (correct, total) = evaluate_counts(model, data)?;
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::presets;
    use super::*;
    use crate::datasets::make_synthetic;

    #[test]
    fn fc_victim_weight_shapes() {
        let spec = presets::mnist_fc_victim();
        let model = build_model(&spec, 1).unwrap();
        let dense_shapes: Vec<(usize, usize)> = model
            .spec
            .layers
            .iter()
            .zip(&model.params)
            .filter_map(|(l, p)| match (l, p) {
                (LayerSpec::Dense { units }, LayerParams::Dense { w, .. }) => {
                    Some((w.len() / units, *units))
                }
                _ => None,
            })
            .collect();
        assert_eq!(dense_shapes, vec![(784, 100), (100, 100), (100, 10)]);
    }

    #[test]
    fn cnn_adversary_structure() {
        let spec = presets::mnist_cnn_adversary();
        let model = build_model(&spec, 1).unwrap();
        let conv_filters: Vec<usize> = model
            .spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(conv_filters, vec![32, 64]);
        let dense_units: Vec<usize> = model
            .spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(dense_units, vec![128, 10]);
        assert_eq!(
            model.spec.layers.last(),
            Some(&LayerSpec::Activation {
                activation: Activation::Softmax
            })
        );
    }

    #[test]
    fn same_seed_bit_identical_weights() {
        let spec = presets::mnist_fc_victim();
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn non_composing_spec_names_layer() {
        let spec = ModelSpec {
            name: "bad".into(),
            input_shape: vec![28, 28, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::MaxPool, // maxpool on a flat shape
            ],
        };
        match build_model(&spec, 0) {
            Err(Error::Spec { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn logits_consistent_with_softmax_output() {
        let spec = presets::mnist_fc_victim();
        let model = build_model(&spec, 3).unwrap();
        let ds = make_synthetic(10, 5).unwrap();
        let probs = model.predict(&ds.images).unwrap();
        let logits = model.predict_logits(&ds.images).unwrap();
        // softmax(logits) must equal the forward output within 1e-12.
        for (lrow, prow) in logits.chunks(10).zip(probs.chunks(10)) {
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = lrow.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (e, &p) in exps.iter().zip(prow) {
                assert!((e / sum - p).abs() < 1e-12);
            }
            // argmax agreement
            let la = argmax_rows(lrow, 10)[0];
            let pa = argmax_rows(prow, 10)[0];
            assert_eq!(la, pa);
        }
    }

    #[test]
    fn zero_final_dense_gives_zero_logits() {
        let spec = ModelSpec {
            name: "tiny".into(),
            input_shape: vec![4],
            layers: vec![
                LayerSpec::Dense { units: 10 },
                LayerSpec::Activation {
                    activation: Activation::Softmax,
                },
            ],
        };
        let mut model = build_model(&spec, 0).unwrap();
        if let LayerParams::Dense { w, b } = &mut model.params[0] {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let images = Images::new([2, 1, 1, 4], vec![0.3; 8]).unwrap();
        // flat input shape [4] means images must be fed as [n,4]; reshape
        // through a flatten-compatible view.
        let mut graph = Graph::new(Mode::Infer, 0);
        let x = graph.input(&[2, 4], images.data.clone()).unwrap();
        let pass = model.forward_on(&mut graph, &x).unwrap();
        let logits = pass.logits.unwrap();
        assert!(graph.values(&logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_near_chance() {
        let ds = make_synthetic(1000, 11).unwrap();
        let mut accs = Vec::new();
        for seed in 0..3 {
            let model = build_model(&presets::mnist_fc_victim(), seed).unwrap();
            accs.push(evaluate_accuracy(&model, &ds).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() < 0.05, "chance-level mean {mean}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = build_model(&presets::mnist_fc_victim(), 0).unwrap();
        let ds = make_synthetic(10, 0).unwrap();
        let empty = ds.select(&[]);
        assert!(evaluate_accuracy(&model, &empty).is_err());
    }

    #[test]
    fn accuracy_invariant_to_order() {
        let ds = make_synthetic(50, 2).unwrap();
        let model = build_model(&presets::mnist_fc_victim(), 1).unwrap();
        let a = evaluate_accuracy(&model, &ds).unwrap();
        let mut idx: Vec<usize> = (0..50).collect();
        idx.reverse();
        let b = evaluate_accuracy(&model, &ds.select(&idx)).unwrap();
        assert_eq!(a, b);
    }
}
