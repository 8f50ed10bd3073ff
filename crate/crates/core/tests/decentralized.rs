mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{prepare_run, serial};
use dflow::orchestrator::{
    audit_path, checkpoint_path, log_path, run_decentralized, AuditStatus, Launch, RunManifest, WorkerRole,
};
use dflow::pipeline::RunSettings;
use dflow::toy::ToySpec;
use dflow::trainer::TrainConfig;

const BIN: &str = env!("CARGO_BIN_EXE_dflow");

fn toy_run(dir: &Path) -> RunManifest {
    let short = TrainConfig {
        steps: 10,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::expert()
    };
    let settings = RunSettings {
        expert_train: short.clone(),
        router_train: short,
        ..RunSettings::default()
    };
    let path = prepare_run(dir, &ToySpec::blobs(3, vec![2, 4, 4], 96, 6), &settings, 0);
    RunManifest::load(&path).unwrap()
}

#[test]
fn crashed_worker_leaves_others_intact() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_run(dir.path());
    let path = dir.path().join("run.toml");
    let exe = Path::new(BIN);
    let clean = run_decentralized(&path, exe, Launch::Concurrent, &[]).unwrap();
    assert!(clean.workers.iter().all(|w| w.succeeded));
    let before: Vec<Vec<u8>> = [0, 2]
        .iter()
        .map(|&k| fs::read(checkpoint_path(&manifest.out_dir, WorkerRole::Expert(k))).unwrap())
        .collect();

    let shard = &manifest.shards[1];
    let bytes = fs::read(shard).unwrap();
    fs::write(shard, &bytes[..bytes.len() / 2]).unwrap();
    let broken = run_decentralized(&path, exe, Launch::Concurrent, &[]).unwrap();
    let status: Vec<bool> = broken.workers.iter().map(|w| w.succeeded).collect();
    assert_eq!(status, vec![true, false, true, true]);
    assert!(
        broken.workers[1].stderr.contains("shard_1.bin"),
        "{}",
        broken.workers[1].stderr
    );
    assert!(!checkpoint_path(&manifest.out_dir, WorkerRole::Expert(1)).exists());
    for (i, &k) in [0, 2].iter().enumerate() {
        let now = fs::read(checkpoint_path(&manifest.out_dir, WorkerRole::Expert(k))).unwrap();
        assert_eq!(now, before[i]);
    }
    assert!(log_path(&manifest.out_dir, WorkerRole::Expert(0)).exists());
}

#[test]
fn audit_passes_with_router_exception_and_flags_missing_logs() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_run(dir.path());
    let path = dir.path().join("run.toml");
    let report = run_decentralized(&path, Path::new(BIN), Launch::Sequential, &[]).unwrap();
    assert_eq!(report.audit.status, AuditStatus::Pass);
    assert!(report
        .audit
        .notes
        .iter()
        .any(|n| n.starts_with("router: reads the full dataset")));
    let saved = fs::read_to_string(manifest.out_dir.join("report.toml")).unwrap();
    assert_eq!(saved, report.to_toml().unwrap());

    let audit = |p: &Path| Command::new(BIN).args(["audit", "--manifest"]).arg(p).output().unwrap();
    let ok = audit(&path);
    assert!(ok.status.success());
    fs::remove_file(audit_path(&manifest.out_dir, WorkerRole::Expert(2))).unwrap();
    let missing = audit(&path);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stdout).starts_with("Inconclusive"));
}
