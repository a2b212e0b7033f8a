use std::collections::HashSet;
use std::fs;

use pgasr::datasets::{generate_synthetic, DatasetBundle, FlowSample, SyntheticConfig};
use pgasr::grid_graph::GraphOperator;
use pgasr::model::{load_checkpoint, ModelConfig, ModelState};
use pgasr::pipeline::{
    run_pgasr, train_pn_only, TrainConfig, TrainContext, Trainer, PHASE_RECORDS_FILE,
};
use pgasr::reweighting::{build_weight_table, ReweightConfig};

fn small_bundle(corruption: f64) -> DatasetBundle {
    generate_synthetic(&SyntheticConfig {
        height: 3,
        width: 3,
        n_steps: 240,
        input_len: 4,
        corruption_fraction: corruption,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        n_st_blocks: 1,
        ..ModelConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        mc_passes: 3,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn weight_table_for_two_folds_of_ten_samples() {
    let bundle = small_bundle(0.0);
    let model_cfg = small_model();
    let op = GraphOperator::new(
        &bundle.graph,
        model_cfg.chebyshev_order,
        model_cfg.lambda_max,
    )
    .unwrap();
    let models: Vec<ModelState> = (0..2)
        .map(|s| {
            ModelState::new(model_cfg.clone(), bundle.num_nodes(), bundle.input_len(), s).unwrap()
        })
        .collect();
    let ten: Vec<&FlowSample> = bundle.train.iter().take(10).collect();
    let partitions = vec![ten[..5].to_vec(), ten[5..].to_vec()];
    let cfg = ReweightConfig {
        mc_passes: 4,
        chunk_size: 4,
        seed: 9,
        ..ReweightConfig::default()
    };
    let table = build_weight_table(
        &models,
        &partitions,
        &op,
        &bundle.graph,
        &bundle.standardizer,
        &cfg,
    )
    .unwrap();
    assert_eq!(table.len(), 10);
    let fold_sizes: Vec<usize> = (0..2)
        .map(|d| table.rows.iter().filter(|r| r.fold == d).count())
        .collect();
    assert_eq!(fold_sizes, vec![5, 5]);
    let ids: HashSet<u64> = table.rows.iter().map(|r| r.sample_id).collect();
    assert_eq!(ids, ten.iter().map(|s| s.id).collect());
    let again = build_weight_table(
        &models,
        &partitions,
        &op,
        &bundle.graph,
        &bundle.standardizer,
        &cfg,
    )
    .unwrap();
    assert_eq!(table.to_csv_bytes().unwrap(), again.to_csv_bytes().unwrap());

    let overlapping = vec![ten[..6].to_vec(), ten[5..].to_vec()];
    assert!(build_weight_table(
        &models,
        &overlapping,
        &op,
        &bundle.graph,
        &bundle.standardizer,
        &cfg
    )
    .is_err());
    assert!(build_weight_table(
        &models[..1],
        &partitions,
        &op,
        &bundle.graph,
        &bundle.standardizer,
        &cfg
    )
    .is_err());
}

#[test]
fn folds_partition_training_set_without_overlap() {
    let bundle = small_bundle(0.3);
    let out = run_pgasr(&bundle, &small_model(), &small_train(), None).unwrap();
    assert_eq!(out.partitions.len(), 2);
    let all: Vec<u64> = out.partitions.concat();
    let train_ids: Vec<u64> = bundle.train.iter().map(|s| s.id).collect();
    assert_eq!(all, train_ids);
    let a: HashSet<u64> = out.partitions[0].iter().copied().collect();
    assert!(out.partitions[1].iter().all(|id| !a.contains(id)));
    let table = out.table.unwrap();
    assert_eq!(table.len(), bundle.train.len());
    for r in &table.rows {
        assert!(out.partitions[r.fold].contains(&r.sample_id));
    }
}

#[test]
fn resumes_completed_phases_bit_exactly() {
    let bundle = small_bundle(0.3);
    let dir = tempfile::tempdir().unwrap();
    let (model_cfg, cfg) = (small_model(), small_train());
    let first = run_pgasr(&bundle, &model_cfg, &cfg, Some(dir.path())).unwrap();
    let fold_bytes: Vec<Vec<u8>> = (0..2)
        .map(|d| fs::read(dir.path().join(format!("fold_{d}.ckpt"))).unwrap())
        .collect();
    let table_bytes = fs::read(dir.path().join("weight_table.csv")).unwrap();

    // crash after the weight table was written
    fs::remove_file(dir.path().join("retrain.ckpt")).unwrap();
    let second = run_pgasr(&bundle, &model_cfg, &cfg, Some(dir.path())).unwrap();
    assert!(second.records[..3].iter().all(|r| r.resumed));
    assert!(!second.records[3].resumed);
    assert_eq!(second.model.params, first.model.params);

    // crash during weight inference
    fs::remove_file(dir.path().join("weight_table.csv")).unwrap();
    fs::remove_file(dir.path().join("retrain.ckpt")).unwrap();
    let third = run_pgasr(&bundle, &model_cfg, &cfg, Some(dir.path())).unwrap();
    for d in 0..2 {
        assert_eq!(
            fs::read(dir.path().join(format!("fold_{d}.ckpt"))).unwrap(),
            fold_bytes[d]
        );
    }
    assert_eq!(
        fs::read(dir.path().join("weight_table.csv")).unwrap(),
        table_bytes
    );
    assert_eq!(third.model.params, first.model.params);

    let (restored, meta) = load_checkpoint(&dir.path().join("retrain.ckpt")).unwrap();
    assert_eq!(restored.params, first.model.params);
    assert_eq!(meta.phase, "retrain");
    let records: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(PHASE_RECORDS_FILE)).unwrap())
            .unwrap();
    assert_eq!(records.as_array().unwrap().len(), 4);

    let other = TrainConfig { seed: 99, ..cfg };
    assert!(run_pgasr(&bundle, &model_cfg, &other, Some(dir.path())).is_err());
}

#[test]
fn best_checkpoint_tracks_minimum_validation_error() {
    let bundle = small_bundle(0.0);
    let model_cfg = small_model();
    let cfg = TrainConfig {
        max_epochs: 8,
        patience_pretrain: 3,
        ..small_train()
    };
    let op = GraphOperator::new(
        &bundle.graph,
        model_cfg.chebyshev_order,
        model_cfg.lambda_max,
    )
    .unwrap();
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    let init = ModelState::new(model_cfg, bundle.num_nodes(), bundle.input_len(), 1).unwrap();
    let train: Vec<&FlowSample> = bundle.train.iter().collect();
    let val: Vec<&FlowSample> = bundle.val.iter().collect();
    let out = Trainer::new(init, &ctx, &cfg)
        .fit(&train, None, &val, 3, 2)
        .unwrap();
    assert!(out.history.iter().all(|e| out.best_val_mae <= e.val_mae));
    let best = &out.history[out.best_epoch - 1];
    assert_eq!(best.val_mae, out.best_val_mae);
    assert!(out.history.len() - out.best_epoch <= 3);
    let val_mae = pgasr::pipeline::validation_mae(&out.state, &val, &ctx, 64).unwrap();
    assert!((val_mae - out.best_val_mae).abs() < 1e-9);
}

#[test]
fn pn_only_is_deterministic_and_matches_report_schema() {
    let bundle = small_bundle(0.0);
    let a = train_pn_only(&bundle, &small_model(), &small_train(), None).unwrap();
    let b = train_pn_only(&bundle, &small_model(), &small_train(), None).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a.table.is_none());
    assert_eq!(a.records.len(), 1);
    assert_eq!(a.records[0].phase, "train");
}

#[test]
fn neutral_weights_reproduce_unweighted_training() {
    // alpha = beta = 0 gives uniform weights inside each chunk
    let bundle = small_bundle(0.3);
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..small_train()
    };
    let out = run_pgasr(&bundle, &small_model(), &cfg, None).unwrap();
    let table = out.table.unwrap();
    for chunk in 0..=table.rows.iter().map(|r| r.chunk).max().unwrap() {
        let w: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.chunk == chunk)
            .map(|r| r.epsilon_tilde)
            .collect();
        assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-12));
    }
}
