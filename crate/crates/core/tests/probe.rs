// Temporary probe for calibrating acceptance expectations. Deleted before release.

use std::time::Instant;

use phenolens::cluster::{compare_spaces_with_matrix, correct_rate, cut_tree, ward_cluster, zscore_columns};
use phenolens::models::{kfold_cv, stratified_folds, train_gbm, train_logreg, TrainConfig};
use phenolens::pipeline::{derive_seed, minimized_model_study};
use phenolens::shap::{build_shap_matrix, global_importance, importance_for_rows};
use phenolens::synth::{generate_cohort, SyntheticConfig};

#[test]
fn probe_numbers() {
    let config = SyntheticConfig::<f64>::default();
    let t0 = Instant::now();
    let cohort = generate_cohort(&config).unwrap();
    println!("generate: {:?}", t0.elapsed());

    let mut counts = std::collections::BTreeMap::new();
    for ph in cohort.phenotype.as_ref().unwrap() {
        *counts.entry(ph.clone()).or_insert(0usize) += 1;
    }
    println!("class counts: {counts:?}");

    // noisy feature correlation
    let predicate_features: Vec<usize> = vec![0, 1, 2, 9, 10, 11, 12, 13, 14, 15];
    let mut max_r: f64 = 0.0;
    let n = cohort.n_samples() as f64;
    let mean_y = cohort.labels.iter().map(|&y| y as f64).sum::<f64>() / n;
    for c in 0..30 {
        if predicate_features.contains(&c) {
            continue;
        }
        let col: Vec<f64> = (0..cohort.n_samples()).map(|r| cohort.features[[r, c]]).collect();
        let mean_x = col.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..cohort.n_samples() {
            let dx = col[i] - mean_x;
            let dy = cohort.labels[i] as f64 - mean_y;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let r = sxy / (sxx.sqrt() * syy.sqrt());
        max_r = max_r.max(r.abs());
    }
    println!("max |r| noisy: {max_r:.4}");

    let train_config = TrainConfig::default();
    let t0 = Instant::now();
    let eval = kfold_cv(&cohort, 10, |train| train_gbm(train, &train_config), derive_seed(42, "folds")).unwrap();
    println!(
        "10-fold CV: {:?}; AUROC {:.4} +- {:.4}; AUPRC {:.4}",
        t0.elapsed(),
        eval.auroc_mean,
        eval.auroc_std,
        eval.auprc_mean
    );

    let t0 = Instant::now();
    let model = train_gbm(&cohort, &train_config).unwrap();
    println!("full fit: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let shap = build_shap_matrix(&model, &cohort).unwrap();
    println!("shap matrix: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let comparisons = compare_spaces_with_matrix(&cohort, &shap, &[2, 3, 4]).unwrap();
    println!("compare spaces: {:?}", t0.elapsed());
    for c in &comparisons {
        println!(
            "k={}: raw overall {:.4}  shap overall {:.4}",
            c.k, c.raw.overall, c.shap.overall
        );
    }

    // per-phenotype top-3
    let truth = cohort.phenotype.as_ref().unwrap();
    for name in ["beta", "gamma", "delta"] {
        let rows: Vec<usize> = (0..cohort.n_samples()).filter(|&i| truth[i] == name).collect();
        let ranking = importance_for_rows(&shap, &rows);
        println!(
            "{name}: top5 {:?}",
            ranking[..5].iter().map(|(f, v)| format!("{f}:{v:.3}")).collect::<Vec<_>>()
        );
    }
    let global = global_importance(&shap);
    println!(
        "global top12: {:?}",
        global[..12].iter().map(|(f, _)| f.clone()).collect::<Vec<_>>()
    );

    // minimized: n = 10 and n = 30
    let folds = stratified_folds(&cohort.labels, 10, derive_seed(42, "folds")).unwrap();
    let t0 = Instant::now();
    let table = minimized_model_study(&cohort, &shap, &[10, 30], &folds, |train| {
        train_gbm(train, &train_config)
    })
    .unwrap();
    println!("minimized: {:?}", t0.elapsed());
    println!(
        "full {:.4}; n=10 {:.4}; n=30 {:.4}",
        table.full.auroc_mean, table.rows[0].eval.auroc_mean, table.rows[1].eval.auroc_mean
    );

    // logreg
    let t0 = Instant::now();
    let lr_eval = kfold_cv(&cohort, 10, |train| train_logreg(train, 500, 0.5, 1e-3), 7).unwrap();
    println!("logreg CV: {:?}; AUROC {:.4}", t0.elapsed(), lr_eval.auroc_mean);

    // ward timing on full data for reference
    let t0 = Instant::now();
    let tree = ward_cluster(&shap.values.view()).unwrap();
    let cut = cut_tree(&tree, 4).unwrap();
    let report = correct_rate::<f64>(&cut, truth).unwrap();
    println!("ward(shap) + cut: {:?}; overall {:.4}", t0.elapsed(), report.overall);
    let t0 = Instant::now();
    let z = zscore_columns(&cohort.features.view());
    let _ = ward_cluster(&z.view()).unwrap();
    println!("ward(raw): {:?}", t0.elapsed());
}
