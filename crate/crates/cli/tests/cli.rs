//! End-to-end checks of the `exotest` binary: exit codes, report schema,
//! and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exotest_core::testutil::desk_problem;

fn exotest() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exotest"))
}

fn write_desk_csv(dir: &tempfile::TempDir) -> PathBuf {
    let p = desk_problem();
    let path = dir.path().join("desk.csv");
    let mut buf = Vec::new();
    p.to_csv(&mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

fn run(mut cmd: Command) -> Output {
    cmd.output().expect("binary runs")
}

/// The canonical test invocation. The stored CSV already carries the
/// intercept column, hence --no-intercept.
fn test_cmd(data: &Path, extra: &[&str]) -> Command {
    let mut c = exotest();
    c.args([
        "test",
        "--data",
        data.to_str().unwrap(),
        "--y",
        "y",
        "--endog",
        "endog_0",
        "--exog",
        "exog_0,exog_1",
        "--instr",
        "instr_0,instr_1,instr_2",
        "--no-intercept",
        "--mc-draws",
        "199",
        "--seed",
        "42",
    ]);
    c.args(extra);
    c
}

#[test]
fn test_command_reports_and_validates_against_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_desk_csv(&dir);
    let out = run(test_cmd(&data, &["--law", "gaussian", "--law", "t:3"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let schema_text = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json"),
    )
    .unwrap();
    let schema: serde_json::Value = serde_json::from_str(&schema_text).unwrap();
    let compiled = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = compiled
        .iter_errors(&report)
        .map(|e| format!("{e}"))
        .collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");

    // Two Monte Carlo blocks, one per law.
    assert_eq!(report["mc"].as_array().unwrap().len(), 2);
    assert_eq!(report["mc"][0]["law"], "gaussian");
    assert_eq!(report["mc"][1]["law"], "t(3)");
    // T1 defined on this dataset (three instruments, one regressor).
    assert!(report["statistics"]["t1"].is_number());
    assert_eq!(report["dims"]["t"], 20);
}

#[test]
fn reports_are_reproducible_modulo_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_desk_csv(&dir);
    let a = run(test_cmd(&data, &[]));
    let b = run(test_cmd(&data, &[]));
    let mut ja: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let mut jb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    ja["manifest"]["timestamp_unix"] = 0.into();
    jb["manifest"]["timestamp_unix"] = 0.into();
    assert_eq!(ja, jb);

    // And across worker counts.
    let c = run(test_cmd(&data, &["--threads", "1"]));
    let d = run(test_cmd(&data, &["--threads", "4"]));
    let mut jc: serde_json::Value = serde_json::from_slice(&c.stdout).unwrap();
    let mut jd: serde_json::Value = serde_json::from_slice(&d.stdout).unwrap();
    jc["manifest"]["timestamp_unix"] = 0.into();
    jd["manifest"]["timestamp_unix"] = 0.into();
    assert_eq!(jc, jd);
}

#[test]
fn missing_role_exits_two_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_desk_csv(&dir);
    let mut cmd = exotest();
    cmd.args([
        "test",
        "--data",
        data.to_str().unwrap(),
        "--y",
        "y",
        "--endog",
        "endog_0",
    ]);
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--instr"), "stderr names the absent role: {err}");
}

#[test]
fn unknown_column_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_desk_csv(&dir);
    let mut cmd = exotest();
    cmd.args([
        "test",
        "--data",
        data.to_str().unwrap(),
        "--y",
        "nonexistent",
        "--endog",
        "endog_0",
        "--instr",
        "instr_0",
    ]);
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn missing_file_exits_two() {
    let mut cmd = exotest();
    cmd.args([
        "test", "--data", "/no/such/file.csv", "--y", "y", "--endog", "a",
        "--instr", "b",
    ]);
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_zero_reps_exits_two() {
    let mut cmd = exotest();
    cmd.args(["simulate", "--preset", "table1", "--reps", "0", "--seed", "7"]);
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_requires_seed() {
    let mut cmd = exotest();
    cmd.args(["simulate", "--preset", "table1"]);
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_csv_and_text_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let prefix_a = dir.path().join("a");
    let prefix_b = dir.path().join("b");
    let base = [
        "simulate",
        "--preset",
        "table1",
        "--cell",
        "k2=5,lambda=0,eta1=0.5,eta2=0.5",
        "--reps",
        "300",
        "--seed",
        "9",
    ];
    let mut cmd_a = exotest();
    cmd_a
        .args(base)
        .args(["--threads", "1", "--out-prefix", prefix_a.to_str().unwrap()]);
    let out_a = run(cmd_a);
    assert!(out_a.status.success());
    let mut cmd_b = exotest();
    cmd_b
        .args(base)
        .args(["--threads", "3", "--out-prefix", prefix_b.to_str().unwrap()]);
    let out_b = run(cmd_b);
    assert!(out_b.status.success());

    let csv_a = std::fs::read(prefix_a.with_extension("csv")).unwrap();
    let csv_b = std::fs::read(prefix_b.with_extension("csv")).unwrap();
    assert_eq!(csv_a, csv_b, "CSV must not depend on the worker count");
    let txt = std::fs::read_to_string(prefix_a.with_extension("txt")).unwrap();
    assert!(txt.contains("rejection frequencies"));
    let header = String::from_utf8_lossy(&csv_a);
    assert!(header.starts_with("statistic,k2,lambda,eta1,eta2,mode,rejection_pct,reps,seed"));
}

#[test]
fn power_emits_flat_curve_without_identification() {
    let mut cmd = exotest();
    cmd.args([
        "power", "--t", "50", "--k2", "5", "--eta", "0,0", "--lambdas",
        "-20,0,100", "--reps", "20000", "--seed", "5",
    ]);
    let out = run(cmd);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let mut t2_values = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        // delta columns all zero without identification.
        assert_eq!(cols[2], "0");
        t2_values.push(cols[9].parse::<f64>().unwrap());
    }
    assert_eq!(t2_values.len(), 3);
    for v in &t2_values {
        assert!((v - 0.05).abs() < 0.01, "flat curve at the level, got {v}");
    }
}

#[test]
fn power_curve_rises_with_identification() {
    let mut cmd = exotest();
    cmd.args([
        "power", "--t", "50", "--k2", "5", "--eta", "0.5,0.5", "--lambdas",
        "0,1,4", "--reps", "20000", "--seed", "5",
    ]);
    let out = run(cmd);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let powers: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(9).unwrap().parse().unwrap())
        .collect();
    assert!(powers[0] < 0.07, "level at a = 0");
    assert!(powers[1] > powers[0]);
    assert!(powers[2] > powers[1]);
}
