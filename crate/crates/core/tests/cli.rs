use std::path::Path;
use std::process::{Command, Output};

use pgasr::datasets::{load_bundle, read_corrupted_ids, CORRUPTED_IDS_FILE};
use pgasr::evaluation::{ExperimentReport, RunReport, REPORT_FILE};

fn pgasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgasr"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_DATA: [&str; 10] = [
    "--h",
    "3",
    "--w",
    "3",
    "--steps",
    "260",
    "--input-len",
    "4",
    "--seed",
    "5",
];
const SMALL_MODEL: [&str; 12] = [
    "--embed-dim",
    "4",
    "--blocks",
    "1",
    "--max-epochs",
    "2",
    "--mc-passes",
    "2",
    "--batch-size",
    "16",
    "--seed",
    "1",
];

fn prepare_small(dir: &Path, corruption: &str) -> String {
    let out = dir.join("data");
    let out_s = out.to_str().unwrap().to_string();
    let mut args = vec![
        "prepare",
        "--synthetic",
        "--corruption",
        corruption,
        "--out",
        &out_s,
    ];
    args.extend(SMALL_DATA);
    let res = pgasr(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out_s
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&pgasr(&["--help"])), 0);
    assert_eq!(code(&pgasr(&["train", "--help"])), 0);
    assert_eq!(code(&pgasr(&["--no-such-flag"])), 2);
    assert_eq!(code(&pgasr(&["train", "--method", "bogus"])), 2);
    assert_eq!(code(&pgasr(&[])), 2);
}

#[test]
fn prepare_synthetic_flags_corrupted_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let res = pgasr(&[
        "prepare",
        "--synthetic",
        "--h",
        "4",
        "--w",
        "4",
        "--steps",
        "3000",
        "--corruption",
        "0.3",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let bundle = load_bundle(&out).unwrap();
    let flagged = read_corrupted_ids(&out.join(CORRUPTED_IDS_FILE)).unwrap();
    let expected = (0.3 * bundle.train.len() as f64).round() as usize;
    assert_eq!(flagged.len(), expected);
    assert_eq!(bundle.corrupted_train_ids(), flagged);
    assert!(out.join("config.toml").exists());
}

#[test]
fn prepare_failures_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("empty_dump");
    std::fs::create_dir(&dump).unwrap();
    let out = dir.path().join("converted");
    let res = pgasr(&[
        "prepare",
        "--convert",
        dump.to_str().unwrap(),
        "--layout",
        "NYCTaxi",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

    let res = pgasr(&["prepare", "--synthetic"]);
    assert_eq!(code(&res), 2);
    let res = pgasr(&[
        "prepare",
        "--synthetic",
        "--corruption",
        "1.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());
}

#[test]
fn train_missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = pgasr(&[
        "train",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn config_file_rejects_unknown_keys_and_yields_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let res = pgasr(&[
        "prepare",
        "--synthetic",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        "x",
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("learning_rat"));

    let good = dir.path().join("good.toml");
    std::fs::write(
        &good,
        "[synthetic]\nheight = 3\nwidth = 5\nn_steps = 260\ninput_len = 4\n",
    )
    .unwrap();
    let out = dir.path().join("data");
    let res = pgasr(&[
        "prepare",
        "--synthetic",
        "--config",
        good.to_str().unwrap(),
        "--w",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let bundle = load_bundle(&out).unwrap();
    assert_eq!((bundle.graph.height(), bundle.graph.width()), (3, 3));
    let snapshot = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("width = 3") && snapshot.contains("height = 3"));
}

#[test]
fn train_pgasr_writes_run_directory_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_small(dir.path(), "0.3");
    let mut payloads = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = dir.path().join(run);
        let mut args = vec![
            "train",
            "--method",
            "pgasr",
            "--alpha",
            "0.8",
            "--beta",
            "0.9",
            "--d",
            "2",
            "--data",
            &data,
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend(SMALL_MODEL);
        let res = pgasr(&args);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        for file in [
            "weight_table.csv",
            "fold_0.ckpt",
            "fold_1.ckpt",
            "retrain.ckpt",
            "config.toml",
            REPORT_FILE,
        ] {
            assert!(out.join(file).exists(), "missing {file}");
        }
        let report: RunReport =
            serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report.seed, 1);
        assert!(report.weights.is_some());
        payloads.push(report.payload().unwrap());
    }
    assert_eq!(payloads[0], payloads[1]);
    assert_eq!(
        std::fs::read(dir.path().join("run_a/weight_table.csv")).unwrap(),
        std::fs::read(dir.path().join("run_b/weight_table.csv")).unwrap()
    );
}

#[test]
fn train_pn_con_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_small(dir.path(), "0.0");
    let out = dir.path().join("run");
    let mut args = vec![
        "train",
        "--method",
        "pn_con",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL_MODEL);
    let res = pgasr(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(out.join("model.ckpt").exists());
    assert!(!out.join("weight_table.csv").exists());
    let snapshot = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("variant = \"pn_con\""));
}

#[test]
fn noise_experiment_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_small(dir.path(), "0.0");
    let out = dir.path().join("exp");
    let mut args = vec![
        "experiment",
        "noise",
        "--levels",
        "0.1,0.5",
        "--seeds",
        "2",
        "--jobs",
        "2",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL_MODEL);
    let res = pgasr(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = std::fs::read_to_string(out.join("fig3_noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let report: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.seeds, vec![1, 2]);
    assert_eq!(report.aggregates.len(), 4);
    for c in &report.cells {
        assert!(c.metrics.is_some());
    }
}

#[test]
fn sweep_and_ablation_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_small(dir.path(), "0.0");
    let out = dir.path().join("sweep");
    let mut args = vec![
        "experiment",
        "sweep",
        "--axis",
        "alpha",
        "--values",
        "0.6,1.0",
        "--seeds",
        "1",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL_MODEL);
    let res = pgasr(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.best.len(), 1);
    assert!(out.join("fig5_sweep.csv").exists());

    let out = dir.path().join("ablation");
    let mut args = vec![
        "experiment",
        "ablation",
        "--seeds",
        "1",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL_MODEL);
    let res = pgasr(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.cells.len(), 4);
    let digests: Vec<_> = report
        .cells
        .iter()
        .filter_map(|c| c.partition_digest.clone())
        .collect();
    assert_eq!(digests.len(), 3);
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}
