use std::fs;
use std::process::Command;

use fedmobile::orchestrator::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmobile"))
}

fn small_config(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = ExperimentConfig { rounds: 2, local_epochs: 1, ..ExperimentConfig::reference(0.6, 0) };
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn run_writes_all_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let status = bin().args(["run", "--config"]).arg(&cfg).args(["--seed", "5", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    for f in ["rounds.csv", "contributions.csv", "shapley.json", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("rounds.csv")).unwrap().lines().count(), 3);
    let echoed = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echoed.seed, 5);
    assert_eq!(echoed.dataset.seed, 5);
}

#[test]
fn ablate_sweeps_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let status =
        bin().args(["ablate", "--config"]).arg(&cfg).args(["--grid", "0.2,0.8", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let summary = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("beta_0.2/rounds.csv").exists());
    assert!(out.join("beta_0.8/rounds.csv").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"rounds": 2, "learning_rat": 0.1}"#).unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("PASS").count(), 7);
}
