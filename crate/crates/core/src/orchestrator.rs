//! Zero-communication run control.
//!
//! Each expert trains in its own OS process that can read only its shard
//! (plus the manifest) and write only its checkpoint and log. Every file
//! access goes through [`AuditedIo`], which appends to a per-worker access
//! log; [`communication_audit`] checks those logs against each worker's
//! allowance. The controller starts all workers at once and only waits for
//! them; there is no intermediate barrier.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Samples;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::router::router_preset;
use crate::trainer::{train_expert, train_router, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub clusters: usize,
    /// One shard per cluster, in cluster order.
    pub shards: Vec<PathBuf>,
    pub expert_preset: String,
    pub router_preset: String,
    pub expert_train: TrainConfig,
    pub router_train: TrainConfig,
    /// Full dataset labelled with partition ids (router, monolithic baseline
    /// and oracle); `None` skips router training.
    pub router_data: Option<PathBuf>,
    /// Held-out samples for evaluation.
    #[serde(default)]
    pub held_out: Option<PathBuf>,
    /// Per-worker slowdown multipliers (≥ 1); empty means all 1.
    #[serde(default)]
    pub stragglers: Vec<f64>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.shards.len() != self.clusters {
            return Err(Error::Config(format!(
                "manifest lists {} shards for K = {}",
                self.shards.len(),
                self.clusters
            )));
        }
        let distinct: BTreeSet<&PathBuf> = self.shards.iter().collect();
        if distinct.len() != self.shards.len() {
            return Err(Error::Config("shard paths must be pairwise distinct".into()));
        }
        if !self.stragglers.is_empty() && self.stragglers.len() != self.clusters {
            return Err(Error::Config(format!(
                "straggler profile has {} entries for K = {}",
                self.stragglers.len(),
                self.clusters
            )));
        }
        if self.stragglers.iter().any(|&m| !(m >= 1.0)) {
            return Err(Error::Config("straggler multipliers must be ≥ 1".into()));
        }
        DenoiserConfig::preset(&self.expert_preset)?;
        router_preset(&self.router_preset)?;
        self.expert_train.validate()?;
        self.router_train.validate()
    }

    pub fn expert_config(&self) -> Result<DenoiserConfig> {
        DenoiserConfig::preset(&self.expert_preset)
    }

    pub fn router_config(&self) -> Result<DenoiserConfig> {
        router_preset(&self.router_preset)
    }

    pub fn full_data(&self) -> Result<&Path> {
        self.router_data
            .as_deref()
            .ok_or_else(|| Error::Config("manifest has no `router_data` dataset".into()))
    }

    pub fn slowdown(&self, k: usize) -> f64 {
        self.stragglers.get(k).copied().unwrap_or(1.0)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "run manifest",
            detail: e.to_string(),
        })
    }

    /// Relative paths resolve against the manifest's directory.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Parse {
            what: "run manifest",
            detail: e.to_string(),
        })?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.shards.iter_mut().for_each(fix);
        m.router_data.iter_mut().chain(m.held_out.iter_mut()).for_each(fix);
        fix(&mut m.out_dir);
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        crate::container::write_file(path, self.to_toml()?.as_bytes())
    }
}

/// Output locations for one worker role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerRole {
    Expert(usize),
    Router,
    /// One model on the full dataset with the expert config (baseline).
    Monolithic,
}

impl WorkerRole {
    pub fn name(&self) -> String {
        match self {
            WorkerRole::Expert(k) => format!("expert_{k}"),
            WorkerRole::Router => "router".into(),
            WorkerRole::Monolithic => "monolithic".into(),
        }
    }
}

pub fn checkpoint_path(out: &Path, role: WorkerRole) -> PathBuf {
    out.join("checkpoints").join(format!("{}.ckpt", role.name()))
}

pub fn log_path(out: &Path, role: WorkerRole) -> PathBuf {
    out.join("logs").join(format!("{}.log", role.name()))
}

pub fn audit_path(out: &Path, role: WorkerRole) -> PathBuf {
    out.join("audit").join(format!("{}.access", role.name()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub cluster: usize,
    pub path: PathBuf,
    pub count: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub clusters: usize,
    pub total: usize,
    pub shards: Vec<ShardEntry>,
}

/// Writes one shard file per cluster plus `shards.toml`.
pub fn shard_dataset(
    data: &Samples,
    assignments: &[usize],
    clusters: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<ShardManifest> {
    if assignments.len() != data.len() {
        return Err(Error::contract(
            "shard_dataset",
            format!("{} assignments for {} samples", assignments.len(), data.len()),
        ));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= clusters) {
        return Err(Error::contract(
            "shard_dataset",
            format!("cluster {bad} outside 0..{clusters}"),
        ));
    }
    let mut shards = Vec::with_capacity(clusters);
    for k in 0..clusters {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| assignments[i] == k).collect();
        let mut shard = data.subset(&rows);
        shard.labels = Some(vec![k; rows.len()]);
        let path = out_dir.join(format!("shard_{k}.bin"));
        shard.store(&path, seed, Some(k))?;
        shards.push(ShardEntry {
            cluster: k,
            path,
            count: rows.len(),
            digest: shard.digest(),
        });
    }
    let manifest = ShardManifest {
        clusters,
        total: data.len(),
        shards,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse {
        what: "shard manifest",
        detail: e.to_string(),
    })?;
    crate::container::write_file(&out_dir.join("shards.toml"), text.as_bytes())?;
    Ok(manifest)
}

/// Labelled copy of the dataset carrying partition ids, for router training.
pub fn labelled(data: &Samples, assignments: &[usize]) -> Samples {
    Samples {
        labels: Some(assignments.to_vec()),
        ..data.clone()
    }
}

/// File access layer that records every read and write of a worker.
pub struct AuditedIo {
    log: File,
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

impl AuditedIo {
    pub fn open(log_path: &Path) -> Result<Self> {
        if let Some(p) = log_path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        Ok(Self { log })
    }

    fn record(&mut self, op: &str, path: &Path) -> Result<()> {
        writeln!(self.log, "{op}\t{}", absolute(path).display())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io("audit log", e))
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        self.record("read", path)?;
        crate::container::read_file(path)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.record("write", path)?;
        crate::container::write_file(path, bytes)
    }

    /// Opens `path` for appending (training logs).
    pub fn append(&mut self, path: &Path) -> Result<File> {
        self.record("write", path)?;
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))
    }
}

/// Runs one worker in the current process: load allowed inputs, train,
/// write the checkpoint. `leak` reads an extra file (audit test fixture).
pub fn run_worker(manifest_path: &Path, role: WorkerRole, leak: Option<&Path>) -> Result<()> {
    let manifest = RunManifest::load(manifest_path)?;
    let out = &manifest.out_dir;
    let mut io = AuditedIo::open(&audit_path(out, role))?;
    io.read(manifest_path)?;
    if let Some(p) = leak {
        io.read(p)?;
    }
    let (input, cfg) = match role {
        WorkerRole::Expert(k) => {
            if k >= manifest.clusters {
                return Err(Error::Config(format!("cluster {k} outside 0..{}", manifest.clusters)));
            }
            (manifest.shards[k].clone(), &manifest.expert_train)
        }
        WorkerRole::Router => (manifest.full_data()?.to_path_buf(), &manifest.router_train),
        WorkerRole::Monolithic => (manifest.full_data()?.to_path_buf(), &manifest.expert_train),
    };
    let bytes = io.read(&input)?;
    let (header, data) = Samples::from_bytes(&bytes, &input)?;
    let mut log = io.append(&log_path(out, role))?;
    let slowdown = match role {
        WorkerRole::Expert(k) => manifest.slowdown(k),
        _ => 1.0,
    };
    let mut last = Instant::now();
    let mut log_err = None;
    let mut observer = |r: &crate::trainer::StepRecord| {
        if let Err(e) = writeln!(log, "{}", r.log_line()) {
            log_err.get_or_insert(e);
        }
        if slowdown > 1.0 {
            std::thread::sleep(last.elapsed().mul_f64(slowdown - 1.0));
        }
        last = Instant::now();
    };
    let ckpt = match role {
        WorkerRole::Expert(k) => {
            if header.cluster != Some(k) {
                return Err(Error::Config(format!(
                    "shard {} belongs to cluster {:?}, not {k}",
                    input.display(),
                    header.cluster
                )));
            }
            train_expert(
                &data,
                &manifest.expert_config()?,
                cfg,
                Some(k),
                manifest.clusters,
                &mut observer,
            )?
        }
        WorkerRole::Router => train_router(&data, &manifest.router_config()?, manifest.clusters, cfg, &mut observer)?,
        WorkerRole::Monolithic => train_expert(
            &data,
            &manifest.expert_config()?,
            cfg,
            None,
            manifest.clusters,
            &mut observer,
        )?,
    };
    if let Some(e) = log_err {
        return Err(Error::io(log_path(out, role), e));
    }
    io.write(&checkpoint_path(out, role), &ckpt.to_bytes()?)
}

/// In-process equivalent of one worker without auditing (used for
/// sequential reference runs and the monolithic baseline).
pub fn train_role_inline(manifest: &RunManifest, role: WorkerRole) -> Result<Checkpoint> {
    match role {
        WorkerRole::Expert(k) => {
            let (_, data) = Samples::load(&manifest.shards[k])?;
            train_expert(
                &data,
                &manifest.expert_config()?,
                &manifest.expert_train,
                Some(k),
                manifest.clusters,
                &mut |_| {},
            )
        }
        WorkerRole::Router => {
            let (_, data) = Samples::load(manifest.full_data()?)?;
            train_router(
                &data,
                &manifest.router_config()?,
                manifest.clusters,
                &manifest.router_train,
                &mut |_| {},
            )
        }
        WorkerRole::Monolithic => {
            let (_, data) = Samples::load(manifest.full_data()?)?;
            train_expert(
                &data,
                &manifest.expert_config()?,
                &manifest.expert_train,
                None,
                manifest.clusters,
                &mut |_| {},
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub role: WorkerRole,
    pub succeeded: bool,
    pub exit_code: Option<i32>,
    pub wallclock_ms: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub stderr: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub status: AuditStatus,
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub makespan_ms: u64,
    pub workers: Vec<WorkerReport>,
    pub audit: AuditVerdict,
}

impl RunReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "run report",
            detail: e.to_string(),
        })
    }
}

/// How workers are launched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Launch {
    /// All workers at once.
    Concurrent,
    /// One after another (reference runs).
    Sequential,
}

fn spawn(exe: &Path, manifest: &Path, role: WorkerRole, leak: Option<&Path>) -> Result<Child> {
    let mut cmd = Command::new(exe);
    cmd.arg("worker").arg("--manifest").arg(manifest);
    match role {
        WorkerRole::Expert(k) => cmd.arg("--cluster").arg(k.to_string()),
        WorkerRole::Router => cmd.arg("--router"),
        WorkerRole::Monolithic => cmd.arg("--monolithic"),
    };
    if let Some(p) = leak {
        cmd.arg("--leak-read").arg(p);
    }
    cmd.stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::io(exe, e))
}

/// Launches every worker named in the manifest and waits for all of them.
/// `leaks` injects foreign reads into given workers (audit fixtures only).
pub fn run_decentralized(
    manifest_path: &Path,
    exe: &Path,
    launch: Launch,
    leaks: &[(WorkerRole, PathBuf)],
) -> Result<RunReport> {
    let manifest = RunManifest::load(manifest_path)?;
    let out = &manifest.out_dir;
    for sub in ["audit", "logs", "checkpoints"] {
        let dir = out.join(sub);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut roles: Vec<WorkerRole> = (0..manifest.clusters).map(WorkerRole::Expert).collect();
    if manifest.router_data.is_some() {
        roles.push(WorkerRole::Router);
    }
    let leak_for = |r: WorkerRole| leaks.iter().find(|(x, _)| *x == r).map(|(_, p)| p.as_path());
    let start = Instant::now();
    let mut reports = Vec::with_capacity(roles.len());
    let finish = |role: WorkerRole, child: Child, began: Instant| -> Result<WorkerReport> {
        let output = child.wait_with_output().map_err(|e| Error::io(exe, e))?;
        Ok(WorkerReport {
            role,
            succeeded: output.status.success(),
            exit_code: output.status.code(),
            wallclock_ms: began.elapsed().as_millis() as u64,
            checkpoint: checkpoint_path(out, role),
            log: log_path(out, role),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        })
    };
    match launch {
        Launch::Sequential => {
            for &role in &roles {
                let began = Instant::now();
                let child = spawn(exe, manifest_path, role, leak_for(role))?;
                reports.push(finish(role, child, began)?);
            }
        }
        Launch::Concurrent => {
            let mut running: Vec<Option<(WorkerRole, Child)>> = Vec::with_capacity(roles.len());
            for &role in &roles {
                running.push(Some((role, spawn(exe, manifest_path, role, leak_for(role))?)));
            }
            let mut done: Vec<Option<WorkerReport>> = vec![None; roles.len()];
            while done.iter().any(Option::is_none) {
                for (i, slot) in running.iter_mut().enumerate() {
                    let exited = match slot {
                        Some((_, c)) => c.try_wait().map_err(|e| Error::io(exe, e))?.is_some(),
                        None => false,
                    };
                    if exited {
                        let (role, child) = slot.take().expect("running worker");
                        let mut r = finish(role, child, start)?;
                        r.wallclock_ms = start.elapsed().as_millis() as u64;
                        done[i] = Some(r);
                    }
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            reports = done.into_iter().map(|r| r.expect("all finished")).collect();
        }
    }
    let makespan_ms = start.elapsed().as_millis() as u64;
    let audit = communication_audit(&manifest, manifest_path, &roles)?;
    let report = RunReport {
        run_id: manifest.run_id.clone(),
        makespan_ms,
        workers: reports,
        audit,
    };
    crate::container::write_file(&out.join("report.toml"), report.to_toml()?.as_bytes())?;
    Ok(report)
}

/// Checks each worker's access log against its allowance.
///
/// Experts may read the manifest and their own shard and write their own
/// checkpoint and log. The router may additionally read the full labelled
/// dataset. Any other access, or any channel operation, is a violation. A
/// missing log makes the verdict inconclusive.
pub fn communication_audit(manifest: &RunManifest, manifest_path: &Path, roles: &[WorkerRole]) -> Result<AuditVerdict> {
    let out = &manifest.out_dir;
    let mut violations = Vec::new();
    let mut notes = Vec::new();
    let mut missing = Vec::new();
    for &role in roles {
        let path = audit_path(out, role);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(_) => {
                missing.push(role.name());
                continue;
            }
        };
        let mut reads = vec![absolute(manifest_path)];
        match role {
            WorkerRole::Expert(k) => reads.push(absolute(&manifest.shards[k])),
            WorkerRole::Router | WorkerRole::Monolithic => {
                if let Some(p) = &manifest.router_data {
                    reads.push(absolute(p));
                    notes.push(format!(
                        "{}: reads the full dataset {} (permitted: it trains on all clusters)",
                        role.name(),
                        p.display()
                    ));
                }
            }
        }
        let writes = [absolute(&checkpoint_path(out, role)), absolute(&log_path(out, role))];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (op, target) = line.split_once('\t').unwrap_or((line, ""));
            let target = PathBuf::from(target);
            let allowed = match op {
                "read" => reads.contains(&target),
                "write" => writes.contains(&target),
                _ => false,
            };
            if !allowed {
                violations.push(format!("{}: {op} {}", role.name(), target.display()));
            }
        }
    }
    let status = if !violations.is_empty() {
        AuditStatus::Fail
    } else if !missing.is_empty() {
        notes.push(format!("no access log for {}", missing.join(", ")));
        AuditStatus::Inconclusive
    } else {
        AuditStatus::Pass
    };
    Ok(AuditVerdict {
        status,
        violations,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn manifest(dir: &Path) -> RunManifest {
        RunManifest {
            run_id: "t".into(),
            clusters: 2,
            shards: vec![dir.join("shard_0.bin"), dir.join("shard_1.bin")],
            expert_preset: "dit-toy".into(),
            router_preset: "router-toy".into(),
            expert_train: TrainConfig::expert(),
            router_train: TrainConfig::router(),
            router_data: None,
            held_out: None,
            stragglers: vec![],
            out_dir: dir.join("run"),
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = Path::new("/tmp/x");
        let m = manifest(dir);
        let text = m.to_toml().unwrap();
        assert_eq!(RunManifest::from_toml(&text, dir).unwrap(), m);
        let mut dup = m.clone();
        dup.shards[1] = dup.shards[0].clone();
        assert!(dup.validate().is_err());
        let mut short = m.clone();
        short.clusters = 3;
        assert!(short.validate().is_err());
        let mut slow = m;
        slow.stragglers = vec![1.0, 0.5];
        assert!(slow.validate().is_err());
    }

    #[test]
    fn shards_partition_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let data = Samples::new(Tensor::new(&[5, 1], vec![0., 1., 2., 3., 4.]).unwrap(), vec![1], None).unwrap();
        let m = shard_dataset(&data, &[1, 0, 1, 1, 0], 2, dir.path(), 3).unwrap();
        assert_eq!(m.shards.iter().map(|s| s.count).sum::<usize>(), 5);
        let (h, s1) = Samples::load(&m.shards[1].path).unwrap();
        assert_eq!(h.cluster, Some(1));
        assert_eq!(s1.ids, vec![0, 2, 3]);
        assert_eq!(s1.data.data(), &[0., 2., 3.]);
        let again = shard_dataset(&data, &[1, 0, 1, 1, 0], 2, dir.path(), 3).unwrap();
        assert_eq!(again, m);
        assert!(shard_dataset(&data, &[0, 2, 0, 0, 0], 2, dir.path(), 3).is_err());
    }

    #[test]
    fn audit_flags_foreign_reads_and_missing_logs() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path());
        let mp = dir.path().join("run.toml");
        let roles = [WorkerRole::Expert(0), WorkerRole::Expert(1)];
        assert_eq!(
            communication_audit(&m, &mp, &roles).unwrap().status,
            AuditStatus::Inconclusive
        );
        for (k, role) in roles.iter().enumerate() {
            let mut io = AuditedIo::open(&audit_path(&m.out_dir, *role)).unwrap();
            io.record("read", &mp).unwrap();
            io.record("read", &m.shards[k]).unwrap();
            io.record("write", &checkpoint_path(&m.out_dir, *role)).unwrap();
        }
        assert_eq!(communication_audit(&m, &mp, &roles).unwrap().status, AuditStatus::Pass);
        let mut io = AuditedIo::open(&audit_path(&m.out_dir, roles[1])).unwrap();
        io.record("read", &m.shards[0]).unwrap();
        let v = communication_audit(&m, &mp, &roles).unwrap();
        assert_eq!(v.status, AuditStatus::Fail);
        assert!(v.violations[0].contains("shard_0.bin"));
    }
}
