use advlab_core::attacks::*;
use advlab_core::datasets::*;
use advlab_core::nn::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let train_ds = make_synthetic(10_000, 11).unwrap();
    let test_ds = make_synthetic(1_000, 12).unwrap();

    // FC victim, desk preset: Adam lr 0.001 batch 200, 20 epochs
    let cfg = TrainConfig {
        loss: TrainLoss::CategoricalCrossentropy,
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.001,
        batch_size: 200,
        epochs: 20,
        seed: 1,
        augment: None,
    };
    let mut victim = build_model(&presets::mnist_fc_victim(), 1).unwrap();
    let h = train(&mut victim, &train_ds, &cfg).unwrap();
    let clean_acc = evaluate_accuracy(&victim, &test_ds).unwrap();
    println!("[{:6.1}s] victim-fc 20ep: train_acc {:.4} test_acc {:.4}",
        t0.elapsed().as_secs_f64(), h.last().unwrap().accuracy.unwrap(), clean_acc);

    // Adversary trains on a disjoint half of the data (its own set).
    let adv_half: Vec<usize> = (5_000..10_000).collect();
    let adv_ds = train_ds.select(&adv_half);
    let mut adv = build_model(&presets::mnist_fc_adversary(), 2).unwrap();
    let cfg_adv = TrainConfig { seed: 2, epochs: 12, ..cfg.clone() };
    train(&mut adv, &adv_ds, &cfg_adv).unwrap();
    println!("[{:6.1}s] adv-fc 12ep: test_acc {:.4}", t0.elapsed().as_secs_f64(),
        evaluate_accuracy(&adv, &test_ds).unwrap());

    // FGS whitebox vs transfer at eps 2.5 on 1000 test samples
    let fgs25 = FgsConfig { epsilon: 2.5, clip: false };
    let wb = fgs_attack(&victim, &test_ds.images, &test_ds.labels, &fgs25).unwrap();
    let tr = fgs_attack(&adv, &test_ds.images, &test_ds.labels, &fgs25).unwrap();
    let acc_on = |imgs: &Images| {
        let ds = LabeledDataset { images: imgs.clone(), labels: test_ds.labels.clone(), provenance: Provenance::Synthetic };
        evaluate_accuracy(&victim, &ds).unwrap()
    };
    let wb_acc = acc_on(&wb.perturbed);
    let tr_acc = acc_on(&tr.perturbed);
    println!("[{:6.1}s] fgs2.5: clean {:.4} whitebox {:.4} transfer {:.4}",
        t0.elapsed().as_secs_f64(), clean_acc, wb_acc, tr_acc);

    // FGS monotonicity probe
    for eps in [0.3, 1.5] {
        let b = fgs_attack(&victim, &test_ds.images, &test_ds.labels, &FgsConfig{epsilon: eps, clip: false}).unwrap();
        println!("          fgs eps {eps}: victim acc {:.4}", acc_on(&b.perturbed));
    }

    // DeepFool on 500
    let sub = test_ds.take(500);
    let df = deepfool_attack(&victim, &sub.images, Some(&sub.labels), &DeepFoolConfig::default()).unwrap();
    let mean_norm = df.norms.iter().sum::<f64>() / df.norms.len() as f64;
    let succ = df.success.iter().filter(|&&s| s).count();
    let fails_at_50 = df.iterations.iter().zip(&df.success).filter(|(_, &s)| !s).filter(|(&i, _)| i == 50).count();
    let fails = df.success.iter().filter(|&&s| !s).count();
    println!("[{:6.1}s] deepfool: success {succ}/500 mean_norm {:.4} fails {fails} (at50: {fails_at_50}) degenerate {}",
        t0.elapsed().as_secs_f64(), mean_norm, df.degenerate.iter().filter(|&&d| d).count());

    // CW appendix params on 100
    let cw = CwConfig::mnist();
    let sub100 = test_ds.take(100);
    let cwb = cw_attack(&victim, &sub100.images, &sub100.labels, &cw).unwrap();
    let cw_succ = cwb.success.iter().filter(|&&s| s).count();
    let mean_cw_norm: f64 = cwb.norms.iter().zip(&cwb.success).filter(|(_, &s)| s).map(|(&n, _)| n).sum::<f64>() / cw_succ.max(1) as f64;
    println!("[{:6.1}s] cw mnist-params: success {cw_succ}/100 mean_norm {:.4}",
        t0.elapsed().as_secs_f64(), mean_cw_norm);
}
