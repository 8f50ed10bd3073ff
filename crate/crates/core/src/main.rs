use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use dflow::checkpoint::store_checkpoint;
use dflow::data::Samples;
use dflow::flow::NoiseSchedule;
use dflow::numeric::RngStream;
use dflow::orchestrator::{
    checkpoint_path, communication_audit, labelled, run_decentralized, run_worker, shard_dataset, train_role_inline,
    AuditStatus, Launch, RunManifest, WorkerRole,
};
use dflow::partition::Partition;
use dflow::pipeline::{cluster_samples, evaluate, load_ensemble, oracle_check, ClusterConfig, EvalConfig, RunSettings};
use dflow::sampler::{expert_usage_report, generate, FusionKind, FusionStrategy};
use dflow::toy::ToySpec;
use dflow::trainer::TrainConfig;
use dflow::{Error, Result};

#[derive(Args, Clone)]
struct Common {
    /// Seed for this stage (defaults to the config's seed, or 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML settings for this stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ManifestArg {
    /// Run manifest (default: <out>/run.toml).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and a held-out set.
    MakeData {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, default_value_t = 1024)]
        held_out: usize,
    },
    /// Partition a dataset with hierarchical k-means.
    Cluster {
        /// Dataset (default: <out>/data/train.bin).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Split a dataset into per-cluster shards and write the run manifest.
    Shard {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Partition file (default: <out>/partition.tsv).
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Train experts in this process.
    TrainExpert {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long, conflicts_with_all = ["all", "monolithic"])]
        cluster: Option<usize>,
        #[arg(long, conflicts_with = "monolithic")]
        all: bool,
        /// Train the single-model baseline on the full dataset instead.
        #[arg(long)]
        monolithic: bool,
    },
    /// Train the router on the full labelled dataset.
    TrainRouter {
        #[command(flatten)]
        m: ManifestArg,
    },
    /// Train every worker as an isolated process and audit the run.
    RunDecentralized {
        #[command(flatten)]
        m: ManifestArg,
        /// Run workers one after another instead of concurrently.
        #[arg(long)]
        sequential: bool,
    },
    /// Generate samples with a fusion strategy.
    Sample {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long, default_value = "top1")]
        strategy: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Use live parameters instead of the EMA shadow.
        #[arg(long)]
        live: bool,
        /// Route the whole batch with its first sample's experts.
        #[arg(long)]
        shared_routing: bool,
    },
    /// Score strategies against held-out data and the exact oracle.
    Evaluate {
        #[command(flatten)]
        m: ManifestArg,
        /// Comma-separated strategies (overrides the config).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Check the cluster decomposition of the exact velocity on random data.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Re-check the access logs of a finished run.
    Audit {
        #[command(flatten)]
        m: ManifestArg,
    },
    #[command(hide = true)]
    Worker {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long)]
        router: bool,
        #[arg(long)]
        monolithic: bool,
        #[arg(long)]
        leak_read: Option<PathBuf>,
    },
}

/// Decentralized flow-matching experts: data, training, sampling, evaluation.
#[derive(Parser)]
#[command(name = "dflow", version)]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Base config with the keys of the TOML file at `path` (if any) applied.
fn train_overlay(base: &TrainConfig, path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            base.overlay(&toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?
        }
        None => base.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    dflow::container::write_file(path, text.as_bytes())
}

fn manifest_path(c: &Common, m: &ManifestArg) -> PathBuf {
    m.manifest.clone().unwrap_or_else(|| c.out.join("run.toml"))
}

fn check_cluster(m: &RunManifest, k: usize) -> Result<()> {
    if k >= m.clusters {
        return Err(Error::Config(format!(
            "--cluster {k} is out of range: valid clusters are 0..={} (K = {})",
            m.clusters - 1,
            m.clusters
        )));
    }
    Ok(())
}

fn run(cmd: Cmd, c: Common) -> Result<()> {
    let cfg_path = c.config.as_deref();
    match cmd {
        Cmd::MakeData {
            samples,
            components,
            held_out,
        } => {
            let mut spec: ToySpec = load_config(cfg_path)?;
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            if let Some(n) = samples {
                spec.samples = n;
            }
            if let Some(k) = components {
                spec.components = k;
            }
            let train = spec.generate()?;
            let held = spec.held_out(held_out.max(1))?;
            train.store(&c.out.join("data/train.bin"), spec.seed, None)?;
            held.store(&c.out.join("data/held_out.bin"), spec.seed, None)?;
            println!(
                "wrote {} training and {} held-out samples of shape {:?} (digest {})",
                train.len(),
                held.len(),
                train.sample_shape,
                train.digest()
            );
        }
        Cmd::Cluster { data, clusters } => {
            let mut cfg: ClusterConfig = load_config(cfg_path)?;
            if let Some(k) = clusters {
                cfg.clusters = k;
            }
            let path = data.unwrap_or_else(|| c.out.join("data/train.bin"));
            let (_, samples) = Samples::load(&path)?;
            let p = cluster_samples(&samples, &cfg, c.seed.unwrap_or(0))?;
            write_text(&c.out.join("partition.tsv"), &p.to_tsv())?;
            println!("K={} sizes={:?} inertia={:.6}", p.k, p.sizes, p.inertia());
        }
        Cmd::Shard { data, partition } => {
            let settings = match cfg_path {
                Some(p) => RunSettings::from_toml(&read_text(p)?)?,
                None => RunSettings::default(),
            };
            let path = data.unwrap_or_else(|| c.out.join("data/train.bin"));
            let (header, samples) = Samples::load(&path)?;
            let ppath = partition.unwrap_or_else(|| c.out.join("partition.tsv"));
            let (k, assignments) = Partition::parse_tsv(&read_text(&ppath)?)?;
            let seed = c.seed.unwrap_or(header.seed);
            let shards = shard_dataset(&samples, &assignments, k, &c.out.join("shards"), seed)?;
            labelled(&samples, &assignments).store(&c.out.join("data/labelled.bin"), seed, None)?;
            let held = c.out.join("data/held_out.bin").exists().then_some("data/held_out.bin");
            let mut settings = settings;
            if let Some(s) = c.seed {
                settings.expert_train.seed = s;
                settings.router_train.seed = s;
            }
            let manifest = settings.manifest(k, "data/labelled.bin", held);
            manifest.validate()?;
            manifest.store(&c.out.join("run.toml"))?;
            for s in &shards.shards {
                println!("shard {}\t{}\t{}", s.cluster, s.count, s.digest);
            }
        }
        Cmd::TrainExpert {
            m,
            cluster,
            all,
            monolithic,
        } => {
            let mut manifest = RunManifest::load(&manifest_path(&c, &m))?;
            manifest.expert_train = train_overlay(&manifest.expert_train, cfg_path, c.seed)?;
            let roles: Vec<WorkerRole> = match (cluster, all, monolithic) {
                (_, _, true) => vec![WorkerRole::Monolithic],
                (Some(k), _, _) => {
                    check_cluster(&manifest, k)?;
                    vec![WorkerRole::Expert(k)]
                }
                (None, true, _) => (0..manifest.clusters).map(WorkerRole::Expert).collect(),
                (None, false, false) => {
                    return Err(Error::Config("pass --cluster <k>, --all or --monolithic".into()));
                }
            };
            for role in roles {
                let ckpt = train_role_inline(&manifest, role)?;
                let path = checkpoint_path(&manifest.out_dir, role);
                store_checkpoint(&ckpt, &path)?;
                println!("{}\t{} steps\t{}", role.name(), ckpt.step, path.display());
            }
        }
        Cmd::TrainRouter { m } => {
            let mut manifest = RunManifest::load(&manifest_path(&c, &m))?;
            manifest.router_train = train_overlay(&manifest.router_train, cfg_path, c.seed)?;
            let ckpt = train_role_inline(&manifest, WorkerRole::Router)?;
            let path = checkpoint_path(&manifest.out_dir, WorkerRole::Router);
            store_checkpoint(&ckpt, &path)?;
            println!("router\t{} steps\t{}", ckpt.step, path.display());
        }
        Cmd::RunDecentralized { m, sequential } => {
            let exe = std::env::current_exe().map_err(|e| Error::Io {
                path: "current executable".into(),
                source: e,
            })?;
            let launch = if sequential {
                Launch::Sequential
            } else {
                Launch::Concurrent
            };
            let report = run_decentralized(&manifest_path(&c, &m), &exe, launch, &[])?;
            print!("{}", report.to_toml()?);
            if let Some(w) = report.workers.iter().find(|w| !w.succeeded) {
                return Err(Error::Config(format!("worker {} failed: {}", w.role.name(), w.stderr)));
            }
        }
        Cmd::Sample {
            m,
            strategy,
            n,
            steps,
            live,
            shared_routing,
        } => {
            let manifest = RunManifest::load(&manifest_path(&c, &m))?;
            let kind: FusionKind = strategy.parse()?;
            let strategy = FusionStrategy {
                kind,
                per_sample: !shared_routing,
            };
            strategy.validate(manifest.clusters)?;
            let config = manifest.expert_config()?;
            let ensemble = load_ensemble(&manifest, kind, !live)?;
            let stream = RngStream::from_label(c.seed.unwrap_or(0), "sample/noise");
            let (x, trace) = generate(
                &ensemble,
                n,
                config.latent_len(),
                steps,
                strategy,
                &stream,
                NoiseSchedule::default(),
            )?;
            let shape = vec![config.channels, config.height, config.width];
            let samples = Samples::new(x, shape, None)?;
            let dir = c.out.join("samples");
            samples.store(&dir.join(format!("{kind}.bin")), c.seed.unwrap_or(0), None)?;
            write_text(&dir.join(format!("{kind}.trace.jsonl")), &trace.to_json_lines())?;
            if !matches!(kind, FusionKind::Oracle | FusionKind::Monolithic) {
                let usage = expert_usage_report(&trace, manifest.clusters)?;
                println!("usage {:?}", usage.overall);
            }
            println!("{}", samples.digest());
        }
        Cmd::Evaluate { m, strategies } => {
            let manifest = RunManifest::load(&manifest_path(&c, &m))?;
            let mut cfg: EvalConfig = load_config(cfg_path)?;
            if !strategies.is_empty() {
                cfg.strategies = strategies;
            }
            let table = evaluate(&manifest, &cfg, c.seed.unwrap_or(0))?;
            write_text(&c.out.join("metrics.txt"), &table.to_key_values())?;
            write_text(&c.out.join("metrics_table.txt"), &table.to_table())?;
            print!("{}", table.to_table());
        }
        Cmd::OracleCheck { trials } => {
            let r = oracle_check(trials, c.seed.unwrap_or(0))?;
            println!(
                "trials={} max_residual={:.3e} mean_residual={:.3e} elapsed_ms={}",
                r.trials, r.max_residual, r.mean_residual, r.elapsed_ms
            );
            if !(r.max_residual <= 1e-8) {
                return Err(Error::Degenerate(format!(
                    "max residual {:.3e} exceeds 1e-8",
                    r.max_residual
                )));
            }
        }
        Cmd::Audit { m } => {
            let path = manifest_path(&c, &m);
            let manifest = RunManifest::load(&path)?;
            let mut roles: Vec<WorkerRole> = (0..manifest.clusters).map(WorkerRole::Expert).collect();
            if manifest.router_data.is_some() {
                roles.push(WorkerRole::Router);
            }
            let v = communication_audit(&manifest, &path, &roles)?;
            println!("{:?}", v.status);
            v.violations.iter().for_each(|x| println!("violation\t{x}"));
            v.notes.iter().for_each(|x| println!("note\t{x}"));
            if v.status != AuditStatus::Pass {
                return Err(Error::Config(format!("audit verdict: {:?}", v.status)));
            }
        }
        Cmd::Worker {
            m,
            cluster,
            router,
            monolithic,
            leak_read,
        } => {
            let role = match (cluster, router, monolithic) {
                (Some(k), false, false) => WorkerRole::Expert(k),
                (None, true, false) => WorkerRole::Router,
                (None, false, true) => WorkerRole::Monolithic,
                _ => return Err(Error::Config("worker needs exactly one role".into())),
            };
            run_worker(&manifest_path(&c, &m), role, leak_read.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(root.command, root.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
