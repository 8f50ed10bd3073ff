#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use dflow::data::Samples;
use dflow::numeric::RngStream;
use dflow::orchestrator::{labelled, shard_dataset};
use dflow::params::ParamSet;
use dflow::pipeline::RunSettings;
use dflow::toy::ToySpec;

static SERIAL: Mutex<()> = Mutex::new(());

/// Tests holding this run one at a time (timings stay meaningful on one core).
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// One status line per acceptance criterion, written past the test harness's
/// output capture so it shows up in every run.
pub fn report(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {n:>2} {:<28} {}  {detail}\n",
        name,
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Replaces every parameter with N(0, std²/fan_in) noise so that zero
/// initialisations stop hiding gradient paths.
pub fn randomize(params: &mut ParamSet, seed: u64, std: f64) {
    let mut s = RngStream::new(seed, 77);
    for t in params.tensors_mut() {
        let fan_in = if t.shape().len() == 2 { t.shape()[0] } else { 1 };
        s.fill_normal(t.data_mut());
        let scale = std / (fan_in as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
}

/// Writes a toy dataset split by its ground-truth labels plus a manifest;
/// returns the manifest path.
pub fn prepare_run(dir: &Path, spec: &ToySpec, settings: &RunSettings, held_out: usize) -> PathBuf {
    let train = spec.generate().unwrap();
    let labels = train.labels.clone().unwrap();
    shard_dataset(&train, &labels, spec.components, &dir.join("shards"), spec.seed).unwrap();
    labelled(&train, &labels)
        .store(&dir.join("data/labelled.bin"), spec.seed, None)
        .unwrap();
    let held = if held_out > 0 {
        let h: Samples = spec.held_out(held_out).unwrap();
        h.store(&dir.join("data/held_out.bin"), spec.seed, None).unwrap();
        Some("data/held_out.bin")
    } else {
        None
    };
    let manifest = settings.manifest(spec.components, "data/labelled.bin", held);
    let path = dir.join("run.toml");
    manifest.store(&path).unwrap();
    path
}
