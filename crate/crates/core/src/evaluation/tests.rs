use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;

fn pairs(data: Vec<f64>) -> Tensor<f64> {
    let n = data.len() / 2;
    Tensor::new(vec![n, 2], data)
}

#[test]
fn metric_examples() {
    let y = Tensor::new(vec![1, 2], vec![20.0, 40.0]);
    let p = Tensor::new(vec![1, 2], vec![30.0, 30.0]);
    let m = compute_metrics(&y, &p, 10.0).unwrap();
    assert_eq!(m.mae_in, 10.0);
    assert_eq!(m.mae_out, 10.0);
    assert!((m.mape_in.unwrap() - 50.0).abs() < 1e-12);
    assert!((m.mape_out.unwrap() - 25.0).abs() < 1e-12);

    // MAE 1 with per-point errors of 50% and 25% averaged to 37.5%.
    let y = Tensor::new(vec![2, 1, 2], vec![2.0, 2.0, 4.0, 4.0]);
    let p = Tensor::new(vec![2, 1, 2], vec![3.0, 3.0, 3.0, 3.0]);
    let m = compute_metrics(&y, &p, 0.0).unwrap();
    assert_eq!(m.mae(), 1.0);
    assert!((m.mape_in.unwrap() - 37.5).abs() < 1e-12);

    let perfect = compute_metrics(&y, &y, 0.0).unwrap();
    assert_eq!((perfect.mae_in, perfect.mape_in), (0.0, Some(0.0)));
}

#[test]
fn empty_mask_reports_absent_mape() {
    let y = pairs(vec![1.0, 2.0, 3.0, 4.0]);
    let p = pairs(vec![0.0, 0.0, 0.0, 0.0]);
    let m = compute_metrics(&y, &p, 10.0).unwrap();
    assert_eq!(m.mape_in, None);
    assert_eq!(m.mape_out, None);
    assert_eq!(m.n_eval_points, 2);
    assert_eq!(m.mae_in, 2.0);
}

#[test]
fn rejects_bad_inputs() {
    let y = pairs(vec![1.0, 2.0]);
    assert!(compute_metrics(&y, &pairs(vec![1.0, 2.0, 3.0, 4.0]), 0.0).is_err());
    assert!(compute_metrics(&y, &pairs(vec![f64::NAN, 2.0]), 0.0).is_err());
    let odd = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
    assert!(compute_metrics(&odd, &odd, 0.0).is_err());
}

proptest! {
    #[test]
    fn matches_naive_reference(
        raw in prop::collection::vec((0.0f64..60.0, -20.0f64..20.0), 1..64),
        threshold in 0.0f64..30.0,
    ) {
        let truth: Vec<f64> = raw.iter().map(|(y, _)| *y).collect();
        let pred: Vec<f64> = raw.iter().map(|(y, e)| y + e).collect();
        let n_pairs = truth.len() / 2;
        prop_assume!(n_pairs > 0);
        let y = pairs(truth[..2 * n_pairs].to_vec());
        let p = pairs(pred[..2 * n_pairs].to_vec());
        let m = compute_metrics(&y, &p, threshold).unwrap();
        for c in 0..2 {
            let mut abs = 0.0;
            let mut pct = 0.0;
            let mut kept = 0;
            for i in 0..n_pairs {
                let (t, q) = (y.data()[2 * i + c], p.data()[2 * i + c]);
                abs += (t - q).abs();
                if t >= threshold {
                    pct += (t - q).abs() / t;
                    kept += 1;
                }
            }
            let mae = if c == 0 { m.mae_in } else { m.mae_out };
            let mape = if c == 0 { m.mape_in } else { m.mape_out };
            prop_assert!((mae - abs / n_pairs as f64).abs() < 1e-6);
            match mape {
                Some(v) => prop_assert!((v - 100.0 * pct / kept as f64).abs() < 1e-6),
                None => prop_assert_eq!(kept, 0),
            }
            prop_assert!(mae >= 0.0);
        }
    }

    #[test]
    fn raising_threshold_never_adds_points(
        truth in prop::collection::vec(0.0f64..60.0, 2..64),
        lo in 0.0f64..30.0,
        step in 0.0f64..30.0,
    ) {
        let n = truth.len() / 2 * 2;
        let y = pairs(truth[..n].to_vec());
        let a = compute_metrics(&y, &y, lo).unwrap();
        let b = compute_metrics(&y, &y, lo + step).unwrap();
        prop_assert!(b.n_mape_points_in <= a.n_mape_points_in);
        prop_assert!(b.n_mape_points_out <= a.n_mape_points_out);
    }
}

fn metric(mae: f64) -> MetricSet {
    MetricSet {
        mae_in: mae,
        mae_out: mae + 1.0,
        mape_in: Some(10.0),
        mape_out: None,
        n_eval_points: 4,
        n_mape_points_in: 4,
        n_mape_points_out: 0,
        mape_mask_threshold: 10.0,
    }
}

fn cell(method: Method, seed: u64, level: f64, mae: Option<f64>) -> CellResult {
    CellResult {
        method,
        seed,
        noise_level: Some(level),
        axis: None,
        value: None,
        metrics: mae.map(metric),
        weights: None,
        partition_digest: None,
        error: mae.is_none().then(|| "boom".to_string()),
    }
}

#[test]
fn aggregate_groups_by_setting() {
    let cells = vec![
        cell(Method::Pn, 0, 0.1, Some(2.0)),
        cell(Method::Pn, 1, 0.1, Some(4.0)),
        cell(Method::Pgasr, 0, 0.1, Some(1.0)),
        cell(Method::Pgasr, 1, 0.1, None),
    ];
    let agg = aggregate(&cells);
    assert_eq!(agg.len(), 2);
    let pn = &agg[0];
    assert_eq!((pn.method, pn.n_seeds), (Method::Pn, 2));
    assert_eq!(pn.mae_in_mean, 3.0);
    assert!((pn.mae_in_std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(pn.mae_mean, 3.5);
    assert_eq!(pn.mape_out_mean, None);
    let pg = &agg[1];
    assert_eq!(pg.n_seeds, 1);
    assert_eq!(pg.mae_in_std, None);
}

#[test]
fn report_files_have_one_row_per_cell() {
    let cells: Vec<CellResult> = [0.1, 0.3, 0.5]
        .iter()
        .flat_map(|&l| {
            (0..4).flat_map(move |s| {
                [
                    cell(Method::Pn, s, l, Some(1.0)),
                    cell(Method::Pgasr, s, l, Some(0.5)),
                ]
            })
        })
        .collect();
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment: ExperimentKind::Noise,
        dataset: "toy".into(),
        config: serde_json::json!({}),
        seeds: vec![0, 1, 2, 3],
        aggregates: aggregate(&cells),
        cells,
        best: Vec::new(),
        timings: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let files = report.write(dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(dir.path().join("fig3_noise.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "noise_level,method,seed,mae_in,mae_out,mape_in,mape_out,weight_ratio,error"
    );
    assert_eq!(lines.count(), 2 * 3 * 4);
    let back: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap())
            .unwrap();
    assert_eq!(back, report);
    assert!(back.payload().unwrap().get("timings").is_none());
    assert!(report.aggregate(Method::Pgasr, Some(0.3), None).is_some());
}

#[test]
fn sweep_axis_parsing() {
    assert_eq!("alpha".parse::<SweepAxis>().unwrap(), SweepAxis::Alpha);
    assert_eq!("D".parse::<SweepAxis>().unwrap(), SweepAxis::Folds);
    assert!("gamma".parse::<SweepAxis>().is_err());
    assert_eq!(SweepAxis::Alpha.default_values().len(), 5);
    assert_eq!(SweepAxis::Folds.default_values(), vec![2.0, 3.0, 4.0, 5.0]);
}
