use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mip_core::Config;

fn mip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mip")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mip(args);
    assert!(
        out.status.success(),
        "mip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

const TINY: [&str; 12] = [
    "--set",
    "model.hidden_dim=4",
    "--set",
    "model.num_prototypes=3",
    "--set",
    "model.num_st_layers=1",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.batch_size=16",
    "--set",
    "data.window=4",
];

fn tiny_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = ok(&["synth", "--nodes", "5", "--steps", "120", "--magnitude", "1.5", "--seed", "3", "--out", s(&data)]);
    assert!(out.contains("120 steps × 5 nodes"));
    for f in ["meta.json", "features.csv", "adjacency.csv"] {
        assert!(data.join(f).exists());
    }
    data
}

#[test]
fn shipped_configs_parse() {
    let metr = Config::from_file(&repo_file("configs/metr-la.toml")).unwrap();
    assert_eq!(metr, Config::metr_la(PathBuf::from("data/metr-la")));
    let bike = Config::from_file(&repo_file("configs/nyc-bike.toml")).unwrap();
    assert_eq!(bike, Config::nyc_bike(PathBuf::from("data/nyc-bike")));
    let desk = Config::from_file(&repo_file("configs/synthetic-shift.toml")).unwrap();
    assert_eq!(desk.data.synthetic.unwrap().num_nodes, 8);
}

#[test]
fn train_evaluate_predict_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let data_set = format!("data.path=\"{}\"", s(&data));
    let mut args = vec!["train", "--set", &data_set, "--out", s(&run)];
    args.extend(TINY);
    let table = ok(&args);
    assert!(table.contains("final horizon") && table.contains("overall"));
    for f in ["checkpoint.json", "train_log.jsonl", "loss_curve.svg", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run.join("checkpoint.json");
    let json = ok(&["evaluate", "--checkpoint", s(&ckpt), "--json", "--all-horizons"]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    let blocks = report["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 4);
    assert_eq!(blocks[3]["split"], "overall");
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(saved, report);

    let forecast = dir.path().join("forecast.csv");
    ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&data.join("features.csv")), "--out", s(&forecast)]);
    let rows = mip_core::data::read_numeric_csv(&forecast).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 5 && r.iter().all(|v| v.is_finite())));

    let scores = dir.path().join("scores");
    let listed = ok(&["export-prompts", "--checkpoint", s(&ckpt), "--node", "2", "--horizon", "4", "--out", s(&scores)]);
    assert_eq!(listed.lines().count(), 6);
    let rows = mip_core::data::read_numeric_csv(&scores.join("invariant_node2_h4.csv")).unwrap();
    assert!(rows.iter().all(|r| r.len() == 3 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));

    let out = mip(&["export-prompts", "--checkpoint", s(&ckpt), "--node", "9", "--horizon", "1", "--out", s(&scores)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_table_json_and_bars() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out_dir = dir.path().join("ablation");
    let data_set = format!("data.path=\"{}\"", s(&data));
    let mut args = vec!["ablate", "--set", &data_set, "--variants", "backbone,full", "--out", s(&out_dir)];
    args.extend(TINY);
    let table = ok(&args);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("Backbone") && table.contains("MIP"));
    let runs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 2);
    assert!(out_dir.join("ablation_rmse.svg").exists() && out_dir.join("ablation_mae.svg").exists());
}

#[test]
fn bench_reports_one_row_per_cell() {
    let json = ok(&[
        "bench",
        "--nodes",
        "6,10",
        "--horizons",
        "3",
        "--repetitions",
        "3",
        "--warmup",
        "1",
        "--json",
        "--set",
        "model.hidden_dim=4",
    ]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["machine"]["cpu"].is_string());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = mip(&["train", "--set", "model.no_such_key=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = dir.path().join("absent");
    let set = format!("data.path=\"{}\"", s(&missing));
    let out = mip(&["train", "--set", &set, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let data = tiny_dataset(dir.path());
    let data_set = format!("data.path=\"{}\"", s(&data));
    let mut args = vec!["train", "--set", &data_set, "--set", "train.learning_rate=1e300", "--set", "train.grad_clip_norm=1e300", "--out", s(dir.path())];
    args.extend(TINY);
    let out = mip(&args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
