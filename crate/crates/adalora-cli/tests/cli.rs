//! Behavior of the `adalora` binary itself: config precedence, error
//! surfacing, the output-root environment variable, and the report/trace
//! subcommands.

use adalora_core::train::ExperimentConfig;
use std::path::Path;
use std::process::{Command, Output};

fn adalora(dir: &Path, env_root: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_adalora"));
    cmd.current_dir(dir).args(args);
    match env_root {
        Some(root) => cmd.env("ADALORA_OUT_DIR", root),
        None => cmd.env_remove("ADALORA_OUT_DIR"),
    };
    cmd.output().expect("spawn adalora")
}

fn assert_success(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small planted task that trains in well under a second.
fn quick_config() -> ExperimentConfig {
    ExperimentConfig {
        dims: vec![6, 8, 5],
        planted_ranks: vec![0, 2],
        base_stds: vec![0.3, 0.5],
        n_train: 256,
        n_val: 64,
        init_rank: Some(3),
        b_init: Some(6),
        t_total: 200,
        t_warmup: 40,
        t_final: 40,
        allocate_every: 20,
        eval_every: 20,
        batch_size: 32,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &quick_config());
    let out = adalora(
        dir.path(),
        None,
        &[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--t-total",
            "120",
            "--scorer",
            "magnitude",
            "--out-dir",
            "exp",
        ],
    );
    assert_success(&out);
    let resolved: ExperimentConfig = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("exp/config_resolved.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved.t_total, 120, "flag must beat the file value");
    assert_eq!(resolved.scorer, "magnitude");
    assert_eq!(resolved.n_train, 256, "file values survive where no flag is given");
    assert!(dir.path().join("exp/metrics.jsonl").exists());
}

#[test]
fn unknown_config_keys_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"optimizer": "ivon", "turbo_mode": true}"#).unwrap();
    let out = adalora(dir.path(), None, &["run", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("turbo_mode"), "stderr should name the bad key: {stderr}");
}

#[test]
fn incompatible_scorer_and_optimizer_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &quick_config());
    let out = adalora(
        dir.path(),
        None,
        &[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--optimizer",
            "adam",
            "--scorer",
            "snr_mean",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("posterior"), "{stderr}");
}

#[test]
fn relative_out_dirs_resolve_under_the_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &quick_config());
    let out = adalora(
        dir.path(),
        Some(root.path()),
        &["run", "--config", config_path.to_str().unwrap(), "--out-dir", "nested/run1"],
    );
    assert_success(&out);
    assert!(
        root.path().join("nested/run1/metrics.jsonl").exists(),
        "artifacts must land under ADALORA_OUT_DIR"
    );
    assert!(!dir.path().join("nested").exists());
}

#[test]
fn sweep_report_and_trace_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config();
    config.record_score_trace = true;
    let config_path = write_config(dir.path(), &config);

    // Two scorers x two seeds plus the fixed baseline = six quick runs.
    let out = adalora(
        dir.path(),
        None,
        &[
            "sweep",
            "--config",
            config_path.to_str().unwrap(),
            "--scorers",
            "snr_mean,magnitude",
            "--runs",
            "2",
            "--out-root",
            "grid",
        ],
    );
    let stdout = assert_success(&out);
    assert!(stdout.contains("scorer comparison"));
    assert!(dir.path().join("grid/summary.csv").exists());
    assert!(dir.path().join("grid/summary.txt").exists());
    let csv = std::fs::read_to_string(dir.path().join("grid/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header + three variants:\n{csv}");
    assert!(csv.contains("fixed_rank_lora"));

    // `report` re-aggregates the same directories to the same table.
    let report_out = adalora(dir.path(), None, &["report", "grid"]);
    let report_text = assert_success(&report_out);
    let sweep_text = std::fs::read_to_string(dir.path().join("grid/summary.txt")).unwrap();
    assert_eq!(report_text, sweep_text);

    // `trace` prints one correlation per allocation snapshot.
    let run_dir = dir.path().join("grid/ivon-snr_mean-t1000-s2000");
    assert!(run_dir.join("score_trace.jsonl").exists());
    let trace_out = adalora(dir.path(), None, &["trace", run_dir.to_str().unwrap()]);
    let trace_text = assert_success(&trace_out);
    assert!(trace_text.starts_with("step  spearman"));
    assert!(trace_text.lines().count() > 4);
}

#[test]
fn trace_without_a_recorded_trace_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &quick_config());
    let out = adalora(
        dir.path(),
        None,
        &["run", "--config", config_path.to_str().unwrap(), "--out-dir", "plain"],
    );
    assert_success(&out);
    let trace_out = adalora(dir.path(), None, &["trace", "plain"]);
    assert!(!trace_out.status.success());
    let stderr = String::from_utf8_lossy(&trace_out.stderr);
    assert!(stderr.contains("record_score_trace"), "{stderr}");
}
