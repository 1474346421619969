//! End-to-end checks of the command-line interface and its exit codes.

use std::path::Path;
use std::process::Command;

const BASE_CONFIG: &str = r#"
seed = 23

[policy]
prompts = 16
positions = 4
vocab = 8

[train]
steps = 20

[run]
checkpoint_every = 10
out_dir = "out"
"#;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grouprl"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, BASE_CONFIG).unwrap();
    path
}

#[test]
fn missing_config_exits_two_and_names_the_path() {
    let output = binary()
        .args(["train", "--config", "/nonexistent/cfg.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("/nonexistent/cfg.toml"), "stderr: {stderr}");
}

#[test]
fn invalid_config_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nmystery_field = 1\n").unwrap();
    let output = binary()
        .args(["train", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn zero_steps_succeeds_with_header_only_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let status = binary()
        .args(["train", "--config", config.to_str().unwrap(), "--steps", "0"])
        .env("GROUPRL_OUT_ROOT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    for arm in ["rank", "zscore"] {
        let csv =
            std::fs::read_to_string(dir.path().join(format!("out/runlog_{arm}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2, "expected header-only log, got: {csv}");
        assert!(lines[0].starts_with('#'));
        assert!(lines[1].starts_with("step,"));
    }
    assert!(dir.path().join("out/summary.json").exists());
    assert!(dir.path().join("out/config_resolved.toml").exists());
}

#[test]
fn train_then_eval_produces_expected_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let status = binary()
        .args(["train", "--config", config.to_str().unwrap()])
        .env("GROUPRL_OUT_ROOT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let run_dir = dir.path().join("out");
    let status = binary()
        .args(["eval", "--run-dir", run_dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());

    let table = std::fs::read_to_string(run_dir.join("winrate_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1], "step,tau_0.1,tau_0.5,tau_0.9");
    // 20 steps with checkpoints every 10 -> steps 10 and 20
    assert_eq!(lines.len(), 4, "table: {table}");
    for row in &lines[2..] {
        assert_eq!(row.split(',').count(), 4);
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval_summary.json")).unwrap())
            .unwrap();
    assert!(summary.get("win_rate").is_some());
    assert!(summary.get("crossing_step").is_some());
}

#[test]
fn theory_lemma_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let status = binary()
        .args(["theory", "--which", "lemma", "--out", report_path.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["all_pass"], serde_json::Value::Bool(true));
    let checks = report["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    for check in checks {
        for key in ["name", "expected", "observed", "tolerance", "pass"] {
            assert!(check.get(key).is_some(), "missing {key} in {check}");
        }
    }
}

#[test]
fn unknown_theory_check_exits_two() {
    let output = binary()
        .args(["theory", "--which", "astrology"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let output = binary().args(["gradcheck"]).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    let report: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let mut logs = Vec::new();
    for rerun in ["a", "b"] {
        let root = dir.path().join(rerun);
        let status = binary()
            .args(["train", "--config", config.to_str().unwrap()])
            .env("GROUPRL_OUT_ROOT", &root)
            .status()
            .unwrap();
        assert!(status.success());
        logs.push(std::fs::read(root.join("out/runlog_rank.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}
