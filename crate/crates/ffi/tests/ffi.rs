use std::ffi::{CStr, CString};
use std::ptr;

use pgasr::datasets::{batch_targets, generate_synthetic, FlowSample, SyntheticConfig};
use pgasr::grid_graph::GraphOperator;
use pgasr::model::{save_checkpoint, CheckpointMeta, ModelConfig, ModelState};
use pgasr::pipeline::{predict_samples, TrainContext};
use pgasr_ffi::*;

fn last_error() -> String {
    let p = pgasr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn weight_algebra_through_the_c_abi() {
    let eps = [2f64.ln(), 0.0];
    let mut out = [0.0; 2];
    let status = unsafe { pgasr_normalize_weights(eps.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::Ok);
    assert!(pgasr_last_error_message().is_null());
    assert!((out[0] - 7.0 / 6.0).abs() < 1e-12 && (out[1] - 5.0 / 6.0).abs() < 1e-12);

    let (u, c) = ([0.5], [0.2]);
    let mut e = [0.0];
    let status =
        unsafe { pgasr_combine_scores(u.as_ptr(), c.as_ptr(), 1, 0.8, 0.9, e.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::Ok);
    assert!((e[0] - 0.58).abs() < 1e-12);

    let status = unsafe { pgasr_normalize_weights(ptr::null(), 3, out.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::NullPointer);
    assert!(last_error().contains("eps"));

    let bad = [f64::NAN];
    let status = unsafe { pgasr_normalize_weights(bad.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::NonFinite);
}

#[test]
fn uncertainty_and_metrics() {
    let stack = [1.0, 3.0];
    let mut u = [0.0];
    let status = unsafe { pgasr_model_uncertainty(stack.as_ptr(), 2, 1, 1, u.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::Ok);
    assert_eq!(u[0], 2.0);
    let status = unsafe { pgasr_model_uncertainty(stack.as_ptr(), 1, 1, 1, u.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::InvalidArgument);

    let y = [2.0, 2.0, 4.0, 4.0];
    let p = [3.0, 3.0, 3.0, 3.0];
    let mut m = PgasrMetrics::default();
    let status = unsafe { pgasr_compute_metrics(y.as_ptr(), p.as_ptr(), 2, 0.0, &mut m) };
    assert_eq!(status, PgasrStatus::Ok);
    assert_eq!((m.mae_in, m.mae_out, m.n_eval_points), (1.0, 1.0, 2));
    assert!((m.mape_in - 37.5).abs() < 1e-12);
    let status = unsafe { pgasr_compute_metrics(y.as_ptr(), p.as_ptr(), 2, 100.0, &mut m) };
    assert_eq!(status, PgasrStatus::Ok);
    assert!(m.mape_in.is_nan());
}

#[test]
fn graph_handles_and_consistency() {
    let mut g = ptr::null_mut();
    assert_eq!(
        unsafe { pgasr_graph_new_grid(2, 3, 4, &mut g) },
        PgasrStatus::Ok
    );
    assert_eq!(unsafe { pgasr_graph_num_nodes(g) }, 6);
    assert_eq!(unsafe { pgasr_graph_num_nodes(ptr::null()) }, 0);

    // a constant field is preserved by neighbor averaging
    let y = [5.0; 12];
    let mut c = [0.0];
    let status =
        unsafe { pgasr_physical_consistency(g, y.as_ptr(), y.as_ptr(), 1, 0, c.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::Ok);
    assert!((c[0] - 1e8).abs() < 1.0);
    let status =
        unsafe { pgasr_physical_consistency(g, y.as_ptr(), y.as_ptr(), 1, 7, c.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::InvalidArgument);
    unsafe { pgasr_graph_free(g) };

    let mut bad = ptr::null_mut();
    assert_eq!(
        unsafe { pgasr_graph_new_grid(2, 3, 6, &mut bad) },
        PgasrStatus::InvalidArgument
    );
    assert!(bad.is_null());
    unsafe { pgasr_graph_free(ptr::null_mut()) };
}

#[test]
fn model_prediction_matches_library() {
    let bundle = generate_synthetic(&SyntheticConfig {
        height: 3,
        width: 3,
        n_steps: 120,
        input_len: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        embed_dim: 4,
        n_st_blocks: 1,
        ..ModelConfig::default()
    };
    let state = ModelState::new(cfg.clone(), 9, 4, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        standardizer: Some(bundle.standardizer.clone()),
        ..CheckpointMeta::default()
    };
    save_checkpoint(&path, &state, &meta).unwrap();

    let samples: Vec<&FlowSample> = bundle.test.iter().take(3).collect();
    let op = GraphOperator::new(&bundle.graph, cfg.chebyshev_order, cfg.lambda_max).unwrap();
    let expected = predict_samples(
        &state,
        &samples,
        &TrainContext::new(&op, &bundle.standardizer),
        8,
    )
    .unwrap();

    let mut model = ptr::null_mut();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { pgasr_model_load(c_path.as_ptr(), &mut model) },
        PgasrStatus::Ok
    );
    assert_eq!(unsafe { pgasr_model_input_len(model) }, 4);
    let mut g = ptr::null_mut();
    assert_eq!(
        unsafe { pgasr_graph_new_grid(3, 3, 8, &mut g) },
        PgasrStatus::Ok
    );
    let x: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.x.data().iter().copied())
        .collect();
    let mut y = vec![0.0f32; 3 * 9 * 2];
    assert_eq!(
        unsafe { pgasr_model_predict(model, g, x.as_ptr(), 3, y.as_mut_ptr()) },
        PgasrStatus::Ok
    );
    for (a, b) in y.iter().zip(expected.data()) {
        assert!((*a as f64 - b).abs() < 1e-3 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert_eq!(batch_targets::<f64>(&samples).shape(), expected.shape());

    let mut small = ptr::null_mut();
    assert_eq!(
        unsafe { pgasr_graph_new_grid(2, 2, 4, &mut small) },
        PgasrStatus::Ok
    );
    let status = unsafe { pgasr_model_predict(model, small, x.as_ptr(), 3, y.as_mut_ptr()) };
    assert_eq!(status, PgasrStatus::InvalidArgument);
    assert!(last_error().contains("nodes"));
    unsafe {
        pgasr_graph_free(small);
        pgasr_graph_free(g);
        pgasr_model_free(model);
    }

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m2 = ptr::null_mut();
    let status = unsafe { pgasr_model_load(missing.as_ptr(), &mut m2) };
    assert_ne!(status, PgasrStatus::Ok);
    assert!(m2.is_null());
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pgasr.h")).unwrap();
    for name in [
        "pgasr_last_error_message",
        "pgasr_graph_new_grid",
        "pgasr_graph_free",
        "pgasr_normalize_weights",
        "pgasr_model_predict",
        "PGASR_STATUS_NULL_POINTER",
        "PgasrMetrics",
        "typedef struct PgasrGraph PgasrGraph",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
