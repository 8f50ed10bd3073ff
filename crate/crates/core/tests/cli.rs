mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dflow");

fn dflow(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).output().unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\n{}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const SETTINGS: &str = "run_id = \"cli\"\n\
[expert_train]\nsteps = 40\nbatch_size = 16\n\
[router_train]\nsteps = 40\nbatch_size = 16\n";

const EVAL: &str = "samples = 128\nsteps = 16\ngrid_rows = 16\ngrid_times = 4\n\
strategies = [\"monolithic\", \"top1\", \"top2\", \"full\", \"oracle\"]\n";

/// make-data → cluster → shard → run-decentralized → sample → evaluate.
fn pipeline(root: &Path) -> (String, String) {
    fs::write(root.join("settings.toml"), SETTINGS).unwrap();
    fs::write(root.join("eval.toml"), EVAL).unwrap();
    let w = root.join("w");
    ok(dflow(
        &w,
        &[
            "make-data",
            "--samples",
            "256",
            "--components",
            "4",
            "--held-out",
            "256",
            "--seed",
            "3",
        ],
    ));
    ok(dflow(&w, &["cluster", "--clusters", "4", "--seed", "1"]));
    let settings = root.join("settings.toml");
    ok(dflow(&w, &["shard", "--config", settings.to_str().unwrap()]));
    ok(dflow(&w, &["run-decentralized"]));
    ok(dflow(&w, &["train-expert", "--monolithic"]));
    let digest = ok(dflow(
        &w,
        &[
            "sample",
            "--strategy",
            "top2",
            "--n",
            "8",
            "--steps",
            "8",
            "--seed",
            "7",
        ],
    ));
    let eval = root.join("eval.toml");
    ok(dflow(
        &w,
        &["evaluate", "--config", eval.to_str().unwrap(), "--seed", "5"],
    ));
    (digest, fs::read_to_string(w.join("metrics.txt")).unwrap())
}

#[test]
fn pipeline_is_reproducible_and_oracle_row_is_best() {
    let _g = common::serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (digest_a, metrics_a) = pipeline(a.path());
    let (digest_b, metrics_b) = pipeline(b.path());
    assert_eq!(digest_a, digest_b);
    assert_eq!(metrics_a, metrics_b);
    let w2: Vec<(String, f64)> = metrics_a
        .lines()
        .filter_map(|l| l.split_once(".w2="))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect();
    assert_eq!(w2.len(), 5);
    let oracle = w2.iter().find(|(k, _)| k == "oracle").unwrap().1;
    assert!(w2.iter().all(|(_, v)| oracle <= *v), "{w2:?}");
    let table = fs::read_to_string(a.path().join("w/metrics_table.txt")).unwrap();
    assert!(table.starts_with("strategy"));
    assert_eq!(table.lines().filter(|l| l.starts_with("top")).count(), 2);
    assert!(a.path().join("w/samples/top2.trace.jsonl").exists());
}

#[test]
fn sample_digest_is_stable_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(dflow(
        w,
        &["make-data", "--samples", "64", "--components", "2", "--seed", "1"],
    ));
    ok(dflow(w, &["cluster", "--clusters", "2"]));
    ok(dflow(w, &["shard"]));
    let args = [
        "sample",
        "--strategy",
        "oracle",
        "--n",
        "16",
        "--steps",
        "64",
        "--seed",
        "7",
    ];
    let first = ok(dflow(w, &args));
    assert_eq!(first, ok(dflow(w, &args)));
    let other = ok(dflow(
        w,
        &[
            "sample",
            "--strategy",
            "oracle",
            "--n",
            "16",
            "--steps",
            "64",
            "--seed",
            "8",
        ],
    ));
    assert_ne!(first, other);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(dflow(
        w,
        &["make-data", "--samples", "64", "--components", "8", "--seed", "1"],
    ));
    ok(dflow(w, &["cluster", "--clusters", "8"]));
    ok(dflow(w, &["shard"]));

    let o = dflow(w, &["train-expert", "--cluster", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("0..=7"));

    let o = dflow(w, &["sample", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = dflow(w, &["sample", "--strategy", "top9"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dflow(w, &["sample", "--strategy", "top1"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expert_0.ckpt"));

    let o = dflow(&w.join("absent"), &["evaluate"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = w.join("bad.toml");
    fs::write(&bad, "components = \"many\"").unwrap();
    let o = dflow(w, &["make-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn oracle_check_reports_residual() {
    let o = Command::new(BIN)
        .args(["oracle-check", "--trials", "50"])
        .output()
        .unwrap();
    let text = ok(o);
    assert!(text.contains("trials=50"));
    let max: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_residual="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max <= 1e-8);
}
