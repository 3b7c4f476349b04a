//! Fast gradient sign attack, l2-normalized form:
//! `x~ = x + eps * grad_x J / ||grad_x J||_2`.

use super::{AdversarialBatch, AttackAlgorithm, DEGENERATE_NORM, FgsConfig};
use crate::autodiff::{kernels::l2_norm, Graph, LossKind, Mode};
use crate::datasets::Images;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model};

const CHUNK: usize = 256;

/// Perturb every sample along its normalized loss gradient. Gradients are
/// taken in infer mode against the true labels. Samples whose gradient
/// norm falls below the degenerate threshold keep a zero perturbation and
/// are flagged instead of failing the batch.
pub fn fgs_attack(model: &Model, x: &Images, y: &[u8], cfg: &FgsConfig) -> Result<AdversarialBatch> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("fgs epsilon must be positive".into()));
    }
    if x.count() != y.len() {
        return Err(Error::Shape(format!(
            "{} images vs {} labels",
            x.count(),
            y.len()
        )));
    }
    let classes = model.output_classes()?;
    let d = x.sample_len();
    let mut perturbed = x.clone();
    let mut degenerate = vec![false; x.count()];
    let mut iterations = vec![1usize; x.count()];

    let mut start = 0;
    while start < x.count() {
        let end = (start + CHUNK).min(x.count());
        let idx: Vec<usize> = (start..end).collect();
        let batch = x.select(&idx);
        let n = batch.count();
        let mut graph = Graph::new(Mode::Infer, 0);
        let shape: Vec<usize> = batch.shape.to_vec();
        let input = graph.input(&shape, batch.data)?;
        let pass = model.forward_on(&mut graph, &input)?;
        let mut onehot = vec![0.0; n * classes];
        for (r, &i) in idx.iter().enumerate() {
            let label = y[i] as usize;
            if label >= classes {
                return Err(Error::Domain(format!("label {label} out of range")));
            }
            onehot[r * classes + label] = 1.0;
        }
        let target = graph.input(&[n, classes], onehot)?;
        let loss = graph.loss(LossKind::CategoricalCrossentropy, &pass.output, Some(&target))?;
        graph.backward(&loss)?;
        let grad = graph
            .grad(&input)
            .ok_or_else(|| Error::Contract("input unreachable from loss".into()))?;
        for (r, &i) in idx.iter().enumerate() {
            let g = &grad[r * d..(r + 1) * d];
            let norm = l2_norm(g);
            if norm < DEGENERATE_NORM {
                degenerate[i] = true;
                iterations[i] = 0;
                continue;
            }
            let out = perturbed.sample_mut(i);
            for (o, &gv) in out.iter_mut().zip(g) {
                *o += cfg.epsilon * gv / norm;
            }
            if cfg.clip {
                for o in out.iter_mut() {
                    *o = o.clamp(0.0, 1.0);
                }
            }
        }
        start = end;
    }

    // Success = misclassified by the source model, judged on the final
    // (possibly clipped) images.
    let preds = model.predict(&perturbed)?;
    let success: Vec<bool> = argmax_rows(&preds, classes)
        .iter()
        .zip(y)
        .map(|(&p, &l)| p != l as usize)
        .collect();
    let mut batch = AdversarialBatch {
        clean: x.clone(),
        perturbed,
        labels: y.to_vec(),
        source_model: model.spec.name.clone(),
        algorithm: AttackAlgorithm::Fgs,
        norms: Vec::new(),
        success,
        degenerate,
        iterations,
        reported_c: vec![None; x.count()],
        probe_log: vec![Vec::new(); x.count()],
    };
    batch.norms = batch.recompute_norms();
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic;
    use crate::nn::{build_model, presets, train, TrainConfig, TrainLoss};
    use crate::nn::OptimizerKind;

    fn small_trained_model() -> (crate::nn::Model, crate::datasets::LabeledDataset) {
        let ds = make_synthetic(200, 1).unwrap();
        let mut model = build_model(&presets::mnist_fc_victim(), 1).unwrap();
        let cfg = TrainConfig {
            loss: TrainLoss::CategoricalCrossentropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 50,
            epochs: 3,
            seed: 2,
            augment: None,
        };
        train(&mut model, &ds, &cfg).unwrap();
        (model, ds)
    }

    #[test]
    fn achieved_norm_equals_epsilon() {
        let (model, ds) = small_trained_model();
        let cfg = FgsConfig {
            epsilon: 2.5,
            clip: false,
        };
        let batch = fgs_attack(&model, &ds.images, &ds.labels, &cfg).unwrap();
        for (i, &n) in batch.norms.iter().enumerate() {
            if !batch.degenerate[i] {
                assert!((n - 2.5).abs() < 1e-6, "sample {i} norm {n}");
            }
        }
    }

    #[test]
    fn zero_epsilon_rejected() {
        let (model, ds) = small_trained_model();
        let cfg = FgsConfig {
            epsilon: 0.0,
            clip: false,
        };
        assert!(fgs_attack(&model, &ds.images, &ds.labels, &cfg).is_err());
    }

    #[test]
    fn clipping_keeps_unit_range() {
        let (model, ds) = small_trained_model();
        let cfg = FgsConfig {
            epsilon: 2.5,
            clip: true,
        };
        let batch = fgs_attack(&model, &ds.images, &ds.labels, &cfg).unwrap();
        assert!(batch
            .perturbed
            .data
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic() {
        let (model, ds) = small_trained_model();
        let cfg = FgsConfig {
            epsilon: 1.5,
            clip: false,
        };
        let a = fgs_attack(&model, &ds.images, &ds.labels, &cfg).unwrap();
        let b = fgs_attack(&model, &ds.images, &ds.labels, &cfg).unwrap();
        assert_eq!(a.perturbed.data, b.perturbed.data);
    }
}
