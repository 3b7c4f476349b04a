//! Carlini-Wagner l2 attack.
//!
//! Optimizes an unconstrained variable w with x' = sigmoid(w), minimizing
//! c * J~(x') + ||x' - x||_2^2 where J~ is the zero-clamped logit margin
//! of the true class. A binary search over c (doubling on failure,
//! halving toward the last failure on success) selects the smallest
//! probed constant whose descent reaches J~ = 0; the returned image is
//! the minimum-norm success over all probes and random starts.

use super::{AdversarialBatch, AttackAlgorithm, CwConfig, CwProbe};
use crate::autodiff::{Graph, LossKind, Mode, OpKind};
use crate::datasets::Images;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Pixel clamp before the inverse-sigmoid reparameterization; sigma^-1
/// diverges at exactly 0 and 1.
const PRECONDITION_DELTA: f64 = 1e-6;
/// Random starts perturb w by N(0, 0.1^2) per coordinate.
const START_NOISE_SIGMA: f64 = 0.1;
/// Loss must improve by this much to reset the abort-early window.
const ABORT_EARLY_TOLERANCE: f64 = 1e-4;

struct SampleOutcome {
    image: Vec<f64>,
    success: bool,
    degenerate: bool,
    iterations: usize,
    reported_c: Option<f64>,
    probes: Vec<CwProbe>,
}

pub fn cw_attack(model: &Model, x: &Images, y: &[u8], cfg: &CwConfig) -> Result<AdversarialBatch> {
    super::AttackConfig::Cw(cfg.clone()).validate()?;
    if x.count() != y.len() {
        return Err(Error::Shape(format!(
            "{} images vs {} labels",
            x.count(),
            y.len()
        )));
    }
    let classes = model.output_classes()?;
    let sample_shape = x.sample_shape();
    let shape = [1, sample_shape[0], sample_shape[1], sample_shape[2]];

    let indices: Vec<usize> = (0..x.count()).collect();
    let results: Vec<Result<SampleOutcome>> = indices
        .par_chunks(cfg.batch_size)
        .flat_map(|chunk| {
            chunk
                .iter()
                .map(|&i| attack_sample(model, x.sample(i), &shape, y[i] as usize, classes, cfg, i))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut perturbed = x.clone();
    let mut success = Vec::with_capacity(x.count());
    let mut degenerate = Vec::with_capacity(x.count());
    let mut iterations = Vec::with_capacity(x.count());
    let mut reported_c = Vec::with_capacity(x.count());
    let mut probe_log = Vec::with_capacity(x.count());
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        if r.success {
            perturbed.sample_mut(i).copy_from_slice(&r.image);
        }
        success.push(r.success);
        degenerate.push(r.degenerate);
        iterations.push(r.iterations);
        reported_c.push(r.reported_c);
        probe_log.push(r.probes);
    }

    let mut batch = AdversarialBatch {
        clean: x.clone(),
        perturbed,
        labels: y.to_vec(),
        source_model: model.spec.name.clone(),
        algorithm: AttackAlgorithm::Cw,
        norms: Vec::new(),
        success,
        degenerate,
        iterations,
        reported_c,
        probe_log,
    };
    batch.norms = batch.recompute_norms();
    Ok(batch)
}

struct EvalResult {
    surrogate: f64,
    dist_sq: f64,
    total: f64,
    pred: usize,
    image: Vec<f64>,
    grad_w: Option<Vec<f64>>,
}

/// Evaluate the CW objective at w; optionally with its gradient.
fn eval_objective(
    model: &Model,
    w: &[f64],
    x0: &[f64],
    shape: &[usize; 4],
    label: usize,
    c: f64,
    with_grad: bool,
) -> Result<EvalResult> {
    let mut graph = Graph::new(Mode::Infer, 0);
    let wt = graph.input(shape, w.to_vec())?;
    let img = graph.apply(OpKind::Sigmoid, &[&wt])?;
    let pass = model.forward_on(&mut graph, &img)?;
    let logits = pass
        .logits
        .ok_or_else(|| Error::Contract("model has no softmax head".into()))?;
    let surrogate = graph.loss(LossKind::CwSurrogate { true_label: label }, &logits, None)?;
    let clean = graph.input(shape, x0.to_vec())?;
    let diff = graph.apply(OpKind::Sub, &[&img, &clean])?;
    let sq = graph.apply(OpKind::Mul, &[&diff, &diff])?;
    let dist = graph.apply(OpKind::SumAll, &[&sq])?;
    let scaled = graph.apply(OpKind::Scale { factor: c }, &[&surrogate])?;
    let total = graph.apply(OpKind::Add, &[&scaled, &dist])?;
    let grad_w = if with_grad {
        graph.backward(&total)?;
        Some(
            graph
                .grad(&wt)
                .ok_or_else(|| Error::Contract("w unreachable from objective".into()))?
                .to_vec(),
        )
    } else {
        None
    };
    let z = graph.values(&logits);
    Ok(EvalResult {
        surrogate: graph.values(&surrogate)[0],
        dist_sq: graph.values(&dist)[0],
        total: graph.values(&total)[0],
        pred: argmax_rows(z, z.len())[0],
        image: graph.values(&img).to_vec(),
        grad_w,
    })
}

fn attack_sample(
    model: &Model,
    x0: &[f64],
    shape: &[usize; 4],
    label: usize,
    classes: usize,
    cfg: &CwConfig,
    sample_idx: usize,
) -> Result<SampleOutcome> {
    if label >= classes {
        return Err(Error::Domain(format!("label {label} out of range")));
    }
    // w0 = sigma^-1(x) on the preconditioned pixels.
    let w0: Vec<f64> = x0
        .iter()
        .map(|&v| {
            let p = v.clamp(PRECONDITION_DELTA, 1.0 - PRECONDITION_DELTA);
            (p / (1.0 - p)).ln()
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None; // (dist_sq, image)
    let mut min_success_c: Option<f64> = None;
    let mut probes = Vec::with_capacity(cfg.binary_search_steps);
    let mut c = cfg.initial_constant;
    let mut last_failure = 0.0;
    let mut total_iterations = 0usize;
    let mut any_finite = false;

    for probe_idx in 0..cfg.binary_search_steps {
        let mut probe_success = false;
        for start_idx in 0..cfg.random_starts {
            let mut w = w0.clone();
            if start_idx > 0 {
                let seed = mix(mix(mix(cfg.seed, sample_idx as u64), probe_idx as u64), start_idx as u64);
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, START_NOISE_SIGMA).expect("valid sigma");
                for v in w.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            let mut best_loss = f64::INFINITY;
            let mut stagnant = 0usize;
            let window = (cfg.max_iterations / 10).max(1);
            let mut start_finite = true;
            for _ in 0..cfg.max_iterations {
                match eval_objective(model, &w, x0, shape, label, c, true) {
                    Ok(ev) => {
                        total_iterations += 1;
                        any_finite = true;
                        if ev.surrogate == 0.0 && ev.pred != label {
                            probe_success = true;
                            if best.as_ref().map_or(true, |(d, _)| ev.dist_sq < *d) {
                                best = Some((ev.dist_sq, ev.image.clone()));
                            }
                        }
                        if cfg.abort_early {
                            if ev.total < best_loss - ABORT_EARLY_TOLERANCE {
                                best_loss = ev.total;
                                stagnant = 0;
                            } else {
                                stagnant += 1;
                                if stagnant >= window {
                                    break;
                                }
                            }
                        }
                        let g = ev.grad_w.expect("gradient requested");
                        for (wv, gv) in w.iter_mut().zip(&g) {
                            *wv -= cfg.learning_rate * gv;
                        }
                    }
                    Err(Error::Overflow(_)) => {
                        // Restart from the next random start.
                        start_finite = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if start_finite {
                // The final w never went through the in-loop check.
                if let Ok(ev) = eval_objective(model, &w, x0, shape, label, c, false) {
                    any_finite = true;
                    if ev.surrogate == 0.0 && ev.pred != label {
                        probe_success = true;
                        if best.as_ref().map_or(true, |(d, _)| ev.dist_sq < *d) {
                            best = Some((ev.dist_sq, ev.image.clone()));
                        }
                    }
                }
            }
        }
        probes.push(CwProbe {
            c,
            success: probe_success,
        });
        if probe_success {
            min_success_c = Some(min_success_c.map_or(c, |m: f64| m.min(c)));
            c = (c + last_failure) / 2.0;
        } else {
            last_failure = c;
            c *= 2.0;
        }
    }

    let success = best.is_some();
    Ok(SampleOutcome {
        image: best.map(|(_, img)| img).unwrap_or_else(|| x0.to_vec()),
        success,
        degenerate: !any_finite,
        iterations: total_iterations,
        reported_c: min_success_c,
        probes,
    })
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
    use super::*;
    use crate::datasets::make_synthetic;
    use crate::nn::{build_model, presets, train, OptimizerKind, TrainConfig, TrainLoss};

    fn trained_fc() -> (Model, crate::datasets::LabeledDataset) {
        let ds = make_synthetic(200, 4).unwrap();
        let mut model = build_model(&presets::mnist_fc_victim(), 1).unwrap();
        let cfg = TrainConfig {
            loss: TrainLoss::CategoricalCrossentropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 50,
            epochs: 4,
            seed: 3,
            augment: None,
        };
        train(&mut model, &ds, &cfg).unwrap();
        (model, ds)
    }

    #[test]
    fn successful_samples_have_zero_surrogate_and_open_interval() {
        let (model, ds) = trained_fc();
        let subset = ds.take(20);
        let cfg = CwConfig {
            binary_search_steps: 3,
            max_iterations: 30,
            learning_rate: 0.2,
            batch_size: 8,
            initial_constant: 1.0,
            abort_early: true,
            random_starts: 2,
            seed: 0,
        };
        let batch = cw_attack(&model, &subset.images, &subset.labels, &cfg).unwrap();
        let logits = model.predict_logits(&batch.perturbed).unwrap();
        let mut successes = 0;
        for i in 0..batch.len() {
            if batch.success[i] {
                successes += 1;
                let row = &logits[i * 10..(i + 1) * 10];
                let t = batch.labels[i] as usize;
                let margin = row[t]
                    - row
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| *k != t)
                        .map(|(_, &v)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                assert!(margin <= 0.0, "sample {i} margin {margin}");
                assert!(batch
                    .perturbed
                    .sample(i)
                    .iter()
                    .all(|&v| v > 0.0 && v < 1.0));
            } else {
                assert_eq!(batch.perturbed.sample(i), batch.clean.sample(i));
            }
        }
        assert!(successes > 0, "no CW successes at all");
    }

    #[test]
    fn reported_c_is_minimal_probed_success() {
        let (model, ds) = trained_fc();
        let subset = ds.take(10);
        let cfg = CwConfig {
            binary_search_steps: 4,
            max_iterations: 25,
            learning_rate: 0.2,
            batch_size: 4,
            initial_constant: 1.0,
            abort_early: true,
            random_starts: 1,
            seed: 1,
        };
        let batch = cw_attack(&model, &subset.images, &subset.labels, &cfg).unwrap();
        for i in 0..batch.len() {
            let min_logged = batch.probe_log[i]
                .iter()
                .filter(|p| p.success)
                .map(|p| p.c)
                .fold(f64::INFINITY, f64::min);
            match batch.reported_c[i] {
                Some(c) => assert_eq!(c, min_logged),
                None => assert!(min_logged.is_infinite()),
            }
        }
    }

    #[test]
    fn hopeless_budget_returns_clean() {
        let (model, ds) = trained_fc();
        let subset = ds.take(5);
        let cfg = CwConfig {
            binary_search_steps: 1,
            max_iterations: 1,
            learning_rate: 1e-9,
            batch_size: 2,
            initial_constant: 1e-9,
            abort_early: false,
            random_starts: 1,
            seed: 0,
        };
        let batch = cw_attack(&model, &subset.images, &subset.labels, &cfg).unwrap();
        for i in 0..batch.len() {
            if !batch.success[i] {
                assert_eq!(batch.perturbed.sample(i), batch.clean.sample(i));
                assert_eq!(batch.norms[i], 0.0);
            }
        }
    }

    /// Binary-search result within one resolution step of a dense grid
    /// search over c, on a 1-D logistic toy embedded in 10 classes.
    #[test]
    fn binary_search_matches_grid_oracle() {
        use crate::nn::{Activation, LayerParams, LayerSpec, ModelSpec};
        let spec = ModelSpec {
            name: "logistic-toy".into(),
            input_shape: vec![1, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 10 },
                LayerSpec::Activation {
                    activation: Activation::Softmax,
                },
            ],
        };
        let mut model = build_model(&spec, 0).unwrap();
        if let LayerParams::Dense { w, b } = &mut model.params[1] {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = -50.0);
            // Two live logits: class 0 responds +8x, class 1 responds -8x+4.
            w[0] = 8.0;
            w[1] = -8.0;
            b[0] = 0.0;
            b[1] = 4.0;
        }
        let x = Images::new([1, 1, 1, 1], vec![0.9]).unwrap();
        let labels = [0u8];
        let run = |steps: usize, c0: f64| {
            let cfg = CwConfig {
                binary_search_steps: steps,
                max_iterations: 120,
                learning_rate: 0.05,
                batch_size: 1,
                initial_constant: c0,
                abort_early: false,
                random_starts: 1,
                seed: 0,
            };
            cw_attack(&model, &x, &labels, &cfg).unwrap()
        };
        // Grid oracle: probe c = c0 * 2^k one at a time (single-step
        // binary searches cannot move c, so each run probes exactly c0*2^0).
        let c0 = 0.125;
        let mut grid_min: Option<f64> = None;
        for k in 0..8 {
            let c = c0 * f64::powi(2.0, k);
            let b = run(1, c);
            if b.success[0] && grid_min.is_none() {
                grid_min = Some(c);
            }
        }
        let grid_min = grid_min.expect("grid search found a working c");
        let searched = run(8, c0);
        assert!(searched.success[0]);
        let reported = searched.reported_c[0].unwrap();
        // Within one doubling of the grid's smallest working constant.
        assert!(
            reported <= grid_min * 2.0 + 1e-12 && reported >= grid_min / 2.0 - 1e-12,
            "reported {reported}, grid {grid_min}"
        );
    }
}
