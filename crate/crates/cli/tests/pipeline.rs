use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5

[catalog]
n_articles = 12
n_weeks = 40
cold_start_share = 0.2

[schema]
window = 8

[model]
encoder_layers = 1
decoder_layers = 1
ffn_dim = 8
prediction_horizon = 10
far_horizon = 8
near_horizon = 3
dropout = 0.0

[train]
near_epochs = 1
far_epochs = 1
batch_size = 8

[evaluate]
horizon = 10

[scaling]
fractions = [0.5, 1.0]
seeds = [1]
test_share = 0.25

[staleness]
max_offset = 2
seeds = [1]
retrain_near_epochs = 1
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, format!("out_dir = {:?}\n{CONFIG}", dir.path().join("out"))).unwrap();
    (dir, conf)
}

fn demandctl(args: &[&str], conf: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demandctl"))
        .args(args)
        .arg("-c")
        .arg(conf)
        .output()
        .unwrap()
}

fn ok(args: &[&str], conf: &Path) -> String {
    let out = demandctl(args, conf);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_is_reproducible() {
    let (dir, conf) = setup();
    let out = dir.path().join("out");
    let run_all = || {
        ok(&["generate"], &conf);
        ok(&["impute"], &conf);
        ok(&["train"], &conf);
        ok(&["predict-grid", "--discounts", "0,0.35,0.7"], &conf);
        ok(&["evaluate", "--baseline", "naive"], &conf)
    };
    let report = run_all();
    assert!(report.contains("naive"), "{report}");
    let first = snapshot(&out);
    run_all();
    assert_eq!(first, snapshot(&out));

    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("article,market,week,discount,demand"));
    let skipped = fs::read_to_string(out.join("grid_skipped.csv")).unwrap().lines().count() - 1;
    assert_eq!(lines.count(), (12 - skipped) * 10 * 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["train"], 5);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("imputed.csv")));
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    for f in ["metrics.csv", "horizon_curve.csv", "evaluation.txt", "train_loss.csv", "sales_histogram.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn stage_order_is_enforced() {
    let (_dir, conf) = setup();
    let out = demandctl(&["train"], &conf);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=stage-order"), "{err}");
    assert!(err.contains("run stage impute first"), "{err}");

    let out = demandctl(&["predict-grid"], &conf);
    assert!(String::from_utf8(out.stderr).unwrap().contains("run stage impute first"));
}

#[test]
fn bad_config_fails_with_one_line() {
    let (dir, _) = setup();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "[model]\nheadz = 2\n").unwrap();
    let out = demandctl(&["generate"], &conf);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config"), "{err}");

    let out = demandctl(&["generate", "--workers", "0"], &dir.path().join("run.conf"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_catalog() {
    let (dir, conf) = setup();
    ok(&["generate"], &conf);
    let a = fs::read(dir.path().join("out/panels.csv")).unwrap();
    let other = dir.path().join("other");
    ok(&["generate", "--seed", "6", "--out-dir", other.to_str().unwrap()], &conf);
    let b = fs::read(other.join("panels.csv")).unwrap();
    assert_ne!(a, b);
    let manifest = fs::read_to_string(other.join("generate.manifest.json")).unwrap();
    assert!(manifest.contains("\"catalog\": 6"));
}

#[test]
fn experiments_write_plot_data() {
    let (dir, conf) = setup();
    ok(&["generate"], &conf);
    ok(&["impute"], &conf);
    ok(&["scaling"], &conf);
    ok(&["staleness"], &conf);
    let out = dir.path().join("out");
    let scaling = fs::read_to_string(out.join("scaling.csv")).unwrap();
    assert!(scaling.starts_with("fraction,train_articles,seed,demand_error,naive_demand_error\n"));
    assert_eq!(scaling.lines().count(), 3);
    let staleness = fs::read_to_string(out.join("staleness.csv")).unwrap();
    assert_eq!(staleness.lines().count(), 1 + 3);
}
