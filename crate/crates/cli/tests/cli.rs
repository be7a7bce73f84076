use std::fs;
use std::process::{Command, Output};

fn axwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axwin")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn describe_micro_totals() {
    let o = axwin(&["describe", "--variant", "micro", "--res", "64", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["variant"], "micro");
    assert_eq!(v["resolution"], serde_json::json!([64, 64]));
    assert!(v["total_params"].as_u64().unwrap() > 0);
    assert_eq!(v["convention"], "MAC");
}

#[test]
fn describe_window_mode_differs_from_axwin() {
    let total = |mode: &str| {
        let o = axwin(&["describe", "--variant", "tiny", "--attn", mode, "--format", "json"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["total_flops"].as_u64().unwrap()
    };
    let (axwin_f, window_f) = (total("axwin"), total("window"));
    assert_ne!(axwin_f, window_f);
    assert!(window_f < axwin_f);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"variant": "micro", "resolution": [64, 96], "split_size": [3, 3, 3, 3]}"#).unwrap();
    let o = axwin(&["describe", "--config", cfg.to_str().unwrap(), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["resolution"], serde_json::json!([64, 96]));
    let o = axwin(&["describe", "--config", cfg.to_str().unwrap(), "--res", "64", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["resolution"], serde_json::json!([64, 64]));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"variant": "micro", "colour": "red"}"#).unwrap();
    assert_eq!(axwin(&["describe", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&cfg, r#"{"resolution": -3}"#).unwrap();
    assert_eq!(axwin(&["describe", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(axwin(&["describe", "--variant", "huge"]).status.code(), Some(2));
    assert_eq!(axwin(&["forward", "--variant", "micro", "--res", "16"]).status.code(), Some(2));
}

#[test]
fn forward_is_deterministic_and_writes_logits() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.axtf");
    let b = dir.path().join("b.axtf");
    for p in [&a, &b] {
        let o = axwin(&[
            "forward",
            "--variant",
            "micro",
            "--res",
            "64",
            "--seed",
            "3",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("logits [1, 1, 1, 1000]"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn forward_reads_its_own_output_format() {
    let dir = tempfile::tempdir().unwrap();
    let logits = dir.path().join("logits.axtf");
    let o = axwin(&["forward", "--variant", "micro", "--res", "64", "--out", logits.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    // A (1, 1, 1, 1000) tensor is not a valid image.
    let o = axwin(&["forward", "--variant", "micro", "--res", "64", "--input", logits.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.axtf");
    fs::write(&bad, b"AXTF garbage").unwrap();
    let o = axwin(&["forward", "--variant", "micro", "--res", "64", "--input", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let missing = dir.path().join("missing.axtf");
    let o = axwin(&["forward", "--variant", "micro", "--res", "64", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn forward_zero_input_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("stats.json");
    let o =
        axwin(&["forward", "--variant", "micro", "--res", "64", "--zeros", "--json", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    for key in ["mean", "std", "min", "max"] {
        assert!(v[key].as_f64().unwrap().is_finite());
    }
}

#[test]
fn check_partition_passes_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("check.json");
    let o = axwin(&["check", "partition", "--json", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["verdicts"].as_array().unwrap().len() >= 5);
}

#[test]
fn check_equiv_passes() {
    let o = axwin(&["check", "equiv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS global_degeneracy"));
}

#[test]
fn check_flops_reports_failed_law_with_exit_1() {
    let o = axwin(&["check", "flops"]);
    let out = stdout(&o);
    assert!(out.contains("PASS instrumented_macs"));
    assert!(out.contains("PASS compare_global_16x"));
    // AxWin attention cost grows faster than 4x per doubling.
    assert!(out.contains("FAIL compare_axwin_4x"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_suite_is_usage_error() {
    assert_eq!(axwin(&["check", "speed"]).status.code(), Some(2));
}

#[test]
fn compare_csv() {
    let o = axwin(&["compare", "--res", "56,112", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "h,w,global,window,axial,axwin");
    assert_eq!(lines.len(), 3);
    let global: Vec<u64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(global[1], 16 * global[0]);
}

#[test]
fn train_smoke_zero_lr_fails_to_converge() {
    let o = axwin(&["train-smoke", "--steps", "16", "--lr", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let losses: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("step"))
        .map(|l| l.split_whitespace().nth(3).unwrap().to_string())
        .collect();
    assert!(losses.len() >= 2);
    assert!(losses.iter().all(|l| l == &losses[0]));
}
