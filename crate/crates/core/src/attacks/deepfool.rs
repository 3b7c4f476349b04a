//! DeepFool: iterative minimal-perturbation attack under a local linear
//! approximation of the classifier.
//!
//! Class scores f_k are the logits Z(.)_k. Per iteration the attack picks
//! the nearest linearized boundary by the ratio |f'_k| / ||w'_k||^2 (the
//! `canonical_ratio` switch substitutes ||w'_k||) and steps by
//! (|f'_l| / ||w'_l||^2) * w'_l. The loop stops at misclassification or
//! after `max_iterations`.

use super::{AdversarialBatch, AttackAlgorithm, DeepFoolConfig, DEGENERATE_NORM};
use crate::autodiff::{kernels::l2_norm, Graph, Mode, OpKind};
use crate::datasets::Images;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model};
use rayon::prelude::*;

struct SampleResult {
    perturbed: Vec<f64>,
    iterations: usize,
    degenerate: bool,
    success: bool,
}

/// Run DeepFool per sample (samples are independent and parallelized;
/// output order follows input order). `labels` supplies the reference
/// class C*(x0); when absent, the model's own prediction on the clean
/// sample is used. A sample already classified away from its reference
/// label gets a zero perturbation and zero iterations.
pub fn deepfool_attack(
    model: &Model,
    x: &Images,
    labels: Option<&[u8]>,
    cfg: &DeepFoolConfig,
) -> Result<AdversarialBatch> {
    if cfg.max_iterations == 0 {
        return Err(Error::Config("deepfool needs at least 1 iteration".into()));
    }
    if cfg.overshoot < 0.0 {
        return Err(Error::Config("negative deepfool overshoot".into()));
    }
    if let Some(y) = labels {
        if y.len() != x.count() {
            return Err(Error::Shape(format!(
                "{} images vs {} labels",
                x.count(),
                y.len()
            )));
        }
    }
    let classes = model.output_classes()?;
    if classes < 2 {
        return Err(Error::Config("deepfool needs at least 2 classes".into()));
    }
    let sample_shape = x.sample_shape();

    // Reference labels: provided or predicted on the clean batch.
    let references: Vec<usize> = match labels {
        Some(y) => y.iter().map(|&l| l as usize).collect(),
        None => argmax_rows(&model.predict_logits(x)?, classes),
    };

    let results: Vec<Result<SampleResult>> = (0..x.count())
        .into_par_iter()
        .map(|i| attack_sample(model, x.sample(i), sample_shape, references[i], classes, cfg))
        .collect();

    let mut perturbed = Images::zeros(x.shape);
    let mut iterations = Vec::with_capacity(x.count());
    let mut degenerate = Vec::with_capacity(x.count());
    let mut success = Vec::with_capacity(x.count());
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        perturbed.sample_mut(i).copy_from_slice(&r.perturbed);
        iterations.push(r.iterations);
        degenerate.push(r.degenerate);
        success.push(r.success);
    }

    let out_labels: Vec<u8> = match labels {
        Some(y) => y.to_vec(),
        None => references.iter().map(|&r| r as u8).collect(),
    };
    let mut batch = AdversarialBatch {
        clean: x.clone(),
        perturbed,
        labels: out_labels,
        source_model: model.spec.name.clone(),
        algorithm: AttackAlgorithm::DeepFool,
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

fn attack_sample(
    model: &Model,
    x0: &[f64],
    sample_shape: [usize; 3],
    reference: usize,
    classes: usize,
    cfg: &DeepFoolConfig,
) -> Result<SampleResult> {
    let shape = [1, sample_shape[0], sample_shape[1], sample_shape[2]];
    let d = x0.len();
    let mut current = x0.to_vec();
    let mut iterations = 0;
    let mut degenerate = false;
    loop {
        let (z, grads) = logits_and_grads(model, &current, &shape, classes)?;
        let pred = argmax_rows(&z, classes)[0];
        if pred != reference {
            break;
        }
        if iterations == cfg.max_iterations {
            break;
        }
        let g_ref = &grads[reference];
        let mut best: Option<(f64, usize, Vec<f64>, f64)> = None; // (ratio, class, w', |f'|)
        for k in 0..classes {
            if k == reference {
                continue;
            }
            let w: Vec<f64> = grads[k].iter().zip(g_ref).map(|(a, b)| a - b).collect();
            let wn = l2_norm(&w);
            if wn < DEGENERATE_NORM {
                continue;
            }
            let f = (z[k] - z[reference]).abs();
            let ratio = if cfg.canonical_ratio {
                f / wn
            } else {
                f / (wn * wn)
            };
            if best.as_ref().map_or(true, |(r, ..)| ratio < *r) {
                best = Some((ratio, k, w, f));
            }
        }
        let Some((_, _, w, f)) = best else {
            degenerate = true;
            break;
        };
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let scale = f / wn2;
        for (c, &wv) in current.iter_mut().zip(&w) {
            *c += scale * wv;
        }
        iterations += 1;
    }

    // Total perturbation stretched by (1 + overshoot).
    let mut perturbed: Vec<f64> = x0
        .iter()
        .zip(&current)
        .map(|(&orig, &cur)| orig + (1.0 + cfg.overshoot) * (cur - orig))
        .collect();
    if cfg.clip {
        for v in perturbed.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let final_images = Images::new(shape.to_vec().try_into().unwrap(), perturbed.clone())?;
    let final_pred = argmax_rows(&model.predict_logits(&final_images)?, classes)[0];
    let success = final_pred != reference;
    let _ = d;
    Ok(SampleResult {
        perturbed,
        iterations,
        degenerate,
        success,
    })
}

/// One forward pass plus the input gradient of every logit.
fn logits_and_grads(
    model: &Model,
    current: &[f64],
    shape: &[usize; 4],
    classes: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut graph = Graph::new(Mode::Infer, 0);
    let input = graph.input(shape, current.to_vec())?;
    let pass = model.forward_on(&mut graph, &input)?;
    let logits = pass
        .logits
        .ok_or_else(|| Error::Contract("model has no softmax head".into()))?;
    let z = graph.values(&logits).to_vec();
    let mut grads = Vec::with_capacity(classes);
    let picks: Vec<_> = (0..classes)
        .map(|k| graph.apply(OpKind::Pick { index: k }, &[&logits]))
        .collect::<Result<_>>()?;
    for pick in &picks {
        graph.backward(pick)?;
        grads.push(
            graph
                .grad(&input)
                .ok_or_else(|| Error::Contract("input unreachable from logit".into()))?
                .to_vec(),
        );
    }
    Ok((z, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic;
    use crate::nn::{build_model, presets, Activation, LayerParams, LayerSpec, ModelSpec};

    /// Hand-built 2-class linear classifier over 2 features.
    fn linear_model(w: [[f64; 2]; 2], b: [f64; 2]) -> Model {
        let spec = ModelSpec {
            name: "linear-2".into(),
            input_shape: vec![1, 1, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Activation {
                    activation: Activation::Softmax,
                },
            ],
        };
        let mut model = build_model(&spec, 0).unwrap();
        if let LayerParams::Dense { w: wv, b: bv } = &mut model.params[1] {
            // row-major [in, out]
            wv.copy_from_slice(&[w[0][0], w[0][1], w[1][0], w[1][1]]);
            bv.copy_from_slice(&b);
        }
        model
    }

    #[test]
    fn linear_model_single_step_norm_is_analytic() {
        // Z_0 = 1.0*x0 + 0.5*x1, Z_1 = -0.5*x0 + 0.25*x1
        let model = linear_model([[1.0, -0.5], [0.5, 0.25]], [0.0, 0.0]);
        let x = Images::new([1, 1, 1, 2], vec![1.0, 0.5]).unwrap();
        // Z_0(x) = 1.25, Z_1(x) = -0.375: f' = -1.625, w' = [-1.5, -0.25]
        let w = [-1.5, -0.25];
        let wn = (w[0] * w[0] + w[1] * w[1]) as f64;
        let expected = 1.625 / wn.sqrt();
        let cfg = DeepFoolConfig {
            max_iterations: 1,
            overshoot: 0.0,
            canonical_ratio: false,
            clip: false,
        };
        let batch = deepfool_attack(&model, &x, Some(&[0]), &cfg).unwrap();
        assert_eq!(batch.iterations, vec![1]);
        assert!(
            (batch.norms[0] - expected).abs() < 1e-9,
            "norm {} vs analytic {expected}",
            batch.norms[0]
        );
    }

    #[test]
    fn already_misclassified_zero_iterations() {
        let model = linear_model([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
        // True label 1 but the model says 0: loop must not run.
        let x = Images::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let cfg = DeepFoolConfig::default();
        let batch = deepfool_attack(&model, &x, Some(&[1]), &cfg).unwrap();
        assert_eq!(batch.iterations, vec![0]);
        assert_eq!(batch.norms[0], 0.0);
        assert!(batch.success[0]);
    }

    #[test]
    fn constant_logits_degenerate_flag() {
        let model = linear_model([[0.0, 0.0], [0.0, 0.0]], [0.3, 0.1]);
        let x = Images::new([1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let cfg = DeepFoolConfig::default();
        let batch = deepfool_attack(&model, &x, Some(&[0]), &cfg).unwrap();
        assert!(batch.degenerate[0]);
        assert!(!batch.success[0]);
        assert_eq!(batch.norms[0], 0.0);
    }

    #[test]
    fn success_mask_means_misclassified() {
        let ds = make_synthetic(30, 2).unwrap();
        let mut model = build_model(&presets::mnist_fc_victim(), 1).unwrap();
        let cfg = crate::nn::TrainConfig {
            loss: crate::nn::TrainLoss::CategoricalCrossentropy,
            optimizer: crate::nn::OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 10,
            epochs: 3,
            seed: 0,
            augment: None,
        };
        crate::nn::train(&mut model, &ds, &cfg).unwrap();
        let df = DeepFoolConfig::default();
        let batch = deepfool_attack(&model, &ds.images, Some(&ds.labels), &df).unwrap();
        let preds = argmax_rows(&model.predict_logits(&batch.perturbed).unwrap(), 10);
        for i in 0..batch.len() {
            if batch.success[i] {
                assert_ne!(preds[i], batch.labels[i] as usize);
            } else if !batch.degenerate[i] && batch.norms[i] > 0.0 {
                assert_eq!(batch.iterations[i], df.max_iterations);
            }
        }
    }
}
