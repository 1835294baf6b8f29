use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn higate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_higate"))
        .current_dir(dir)
        .args(args)
        .env("HIGATE_THREADS", "2")
        .output()
        .expect("spawn higate")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = higate(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generated(dir: &Path) {
    ok(
        dir,
        &["generate", "--out", "t.jsonl", "--n", "3000", "--seed", "4"],
    );
}

#[test]
fn generate_then_calibrate_recovers_temperature() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    assert_eq!(
        fs::read_to_string(dir.path().join("t.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3000
    );
    let stdout = ok(
        dir.path(),
        &["calibrate", "--trace", "t.jsonl", "--plotdata", "rel.csv"],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let t = v["temperature"].as_f64().unwrap();
    assert!((t - 2.0).abs() < 0.2, "{t}");
    let rel = fs::read_to_string(dir.path().join("rel.csv")).unwrap();
    assert!(rel.starts_with("bin_low,bin_high,count,mean_conf,mean_acc,stage\n"));
}

#[test]
fn trained_gate_is_usable_as_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    ok(
        dir.path(),
        &[
            "train-gate",
            "--trace",
            "t.jsonl",
            "--gate-kind",
            "svm",
            "--out",
            "g.json",
        ],
    );
    let stdout = ok(
        dir.path(),
        &[
            "evaluate",
            "--trace",
            "t.jsonl",
            "--policy",
            "gate:post:g.json",
            "--policy",
            "never-offload",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["policy"], "gate:post:svm");
}

#[test]
fn beta_sweep_writes_policy_major_rows() {
    let dir = tempfile::tempdir().unwrap();
    generated(dir.path());
    ok(
        dir.path(),
        &[
            "sweep-beta",
            "--trace",
            "t.jsonl",
            "--policy",
            "ft",
            "--policy",
            "full-offload",
            "--beta-grid",
            "0:1:0.25",
            "--out",
            "b.csv",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "policy,beta,alpha,gamma,cpi,accuracy,offload_fraction,tp,fp,fn,tn,f1"
    );
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines[1].starts_with("ft,0,"));
    assert!(lines[6].starts_with("full-offload,0,"));
}

#[test]
fn run_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "run",
            "--out-dir",
            out,
            "--seed",
            "5",
            "--beta-grid",
            "0,0.5,1",
            "--ratio-grid",
            "0:1:0.5",
            "--policy",
            "ft",
            "--policy",
            "cft",
            "--policy",
            "gate:post:lr",
            "--policy",
            "full-offload",
        ]
    };
    ok(dir.path(), &args("a"));
    let out = Command::new(env!("CARGO_BIN_EXE_higate"))
        .current_dir(dir.path())
        .args(args("b"))
        .env("HIGATE_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    for name in [
        "beta_sweep.csv",
        "ratio_sweep.csv",
        "report.json",
        "gate_post_lr.json",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn run_reads_a_config_file_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"synth": {"n": 2000, "seed": 9}, "out_dir": "from_config",
            "policies": ["ft", "never-offload"], "beta_grid": [0.2, 0.4]}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "run",
            "--config",
            "cfg.json",
            "--out-dir",
            "from_flag",
            "--beta",
            "0.3",
        ],
    );
    assert!(!dir.path().join("from_config").exists());
    let csv = fs::read_to_string(dir.path().join("from_flag/beta_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("from_flag/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["cost"]["beta"], 0.3);
}

#[test]
fn missing_trace_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = higate(
        dir.path(),
        &["evaluate", "--trace", "nowhere.jsonl", "--policy", "ft:0.5"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));

    let out = higate(
        dir.path(),
        &["run", "--trace", "nowhere.jsonl", "--out-dir", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

#[test]
fn malformed_inputs_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"id\":\"a\",\"label\":0,\"sml_probs\":[0.7,0.7],\"lml_correct\":true}\n",
    )
    .unwrap();
    let out = higate(
        dir.path(),
        &[
            "evaluate",
            "--trace",
            "bad.jsonl",
            "--policy",
            "never-offload",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    generated(dir.path());
    let out = higate(
        dir.path(),
        &["evaluate", "--trace", "t.jsonl", "--policy", "ft:2"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = higate(
        dir.path(),
        &[
            "evaluate",
            "--trace",
            "t.jsonl",
            "--policy",
            "never-offload",
            "--beta",
            "-1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_higate"))
        .current_dir(dir.path())
        .args(["generate", "--out", "t.jsonl", "--n", "10"])
        .env("HIGATE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_the_boundary_rule() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["evaluate", "--help"]);
    assert!(help.contains("confidence >= theta"));
}
