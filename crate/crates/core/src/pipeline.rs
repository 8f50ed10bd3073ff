//! End-to-end stages shared by the CLI and the tests: the decomposition
//! residual suite, clustering, ensemble loading and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::data::Samples;
use crate::error::{Error, Result};
use crate::eval::{oracle_kl, router_accuracy, velocity_error, wasserstein2_1d_sliced, ValidationGrid};
use crate::flow::NoiseSchedule;
use crate::numeric::{RngStream, Tensor};
use crate::oracle::DiscreteDataset;
use crate::orchestrator::{checkpoint_path, RunManifest, WorkerRole};
use crate::partition::{embed, hierarchical_partition, EmbedderKind, Partition};
use crate::sampler::{
    expert_usage_report, fuse_velocities, generate, Ensemble, FusionKind, FusionStrategy, OracleExpert, RoutingModel,
    VelocityModel,
};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub trials: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub elapsed_ms: u64,
}

/// Checks the cluster decomposition of the marginal velocity on random
/// labelled datasets (N ≤ 256, d ≤ 8, K ≤ 8, t ∈ [1e-3, 1]).
pub fn oracle_check(trials: usize, seed: u64) -> Result<OracleCheckReport> {
    if trials == 0 {
        return Err(Error::contract("oracle_check", "need at least one trial"));
    }
    let start = Instant::now();
    let base = RngStream::from_label(seed, "oracle-check");
    let (mut max, mut sum) = (0.0f64, 0.0);
    for trial in 0..trials {
        let mut s = base.substream(trial as u64);
        let n = 1 + s.below(256) as usize;
        let d = 1 + s.below(8) as usize;
        let k = 1 + s.below(n.min(8) as u64) as usize;
        let spread = s.uniform(0.1, 3.0);
        let mut pts = vec![0.0; n * d];
        s.fill_normal(&mut pts);
        pts.iter_mut().for_each(|v| *v *= spread);
        // every cluster gets at least one point, the rest at random
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < k { i } else { s.below(k as u64) as usize })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| s.uniform(0.1, 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let ds = DiscreteDataset::weighted(&Tensor::new(&[n, d], pts)?, weights.iter().map(|w| w / total).collect())?
            .with_labels(labels, k)?;
        let t = s.uniform(1e-3, 1.0);
        let anchor = s.below(n as u64) as usize;
        let mut xt = vec![0.0; d];
        s.fill_normal(&mut xt);
        xt.iter_mut()
            .zip(ds.point(anchor))
            .for_each(|(x, p)| *x = (1.0 - t) * p + t * *x);
        let r = ds.decomposition_residual(&xt, t)?;
        max = max.max(r);
        sum += r;
    }
    Ok(OracleCheckReport {
        trials,
        max_residual: max,
        mean_residual: sum / trials as f64,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub clusters: usize,
    /// Fine centroid count before consolidation; 0 means `4·K` capped at N.
    pub fine_clusters: usize,
    pub iterations: usize,
    pub embedder: EmbedderKind,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            fine_clusters: 0,
            iterations: 50,
            embedder: EmbedderKind::Identity,
        }
    }
}

pub fn cluster_samples(data: &Samples, cfg: &ClusterConfig, seed: u64) -> Result<Partition> {
    let features = embed(&data.data, cfg.embedder)?;
    let fine = if cfg.fine_clusters == 0 {
        (4 * cfg.clusters).min(data.len())
    } else {
        cfg.fine_clusters
    };
    let mut stream = RngStream::from_label(seed, "partition");
    hierarchical_partition(&features, fine, cfg.clusters, cfg.iterations, &mut stream)
}

/// Settings that, together with the shard layout, make up a run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub run_id: String,
    pub expert_preset: String,
    pub router_preset: String,
    pub expert_train: TrainConfig,
    pub router_train: TrainConfig,
    pub stragglers: Vec<f64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            run_id: "toy".into(),
            expert_preset: "dit-toy".into(),
            router_preset: "router-toy".into(),
            expert_train: TrainConfig::expert(),
            router_train: TrainConfig::router(),
            stragglers: vec![],
        }
    }
}

impl RunSettings {
    /// Parses settings; partial `expert_train` / `router_train` tables
    /// override only the keys they name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("run settings: {e}")))?;
        let expert = table.remove("expert_train");
        let router = table.remove("router_train");
        let mut s: Self = table
            .try_into()
            .map_err(|e| Error::Config(format!("run settings: {e}")))?;
        let sub = |v: Option<toml::Value>, base: &TrainConfig| -> Result<TrainConfig> {
            match v {
                None => Ok(base.clone()),
                Some(toml::Value::Table(t)) => base.overlay(&t),
                Some(_) => Err(Error::Config("train settings must be tables".into())),
            }
        };
        s.expert_train = sub(expert, &s.expert_train)?;
        s.router_train = sub(router, &s.router_train)?;
        Ok(s)
    }

    /// Manifest for shards written under `dir` by [`shard_dataset`], with
    /// paths relative to `dir`.
    ///
    /// [`shard_dataset`]: crate::orchestrator::shard_dataset
    pub fn manifest(&self, clusters: usize, full: &str, held_out: Option<&str>) -> RunManifest {
        RunManifest {
            run_id: self.run_id.clone(),
            clusters,
            shards: (0..clusters).map(|k| format!("shards/shard_{k}.bin").into()).collect(),
            expert_preset: self.expert_preset.clone(),
            router_preset: self.router_preset.clone(),
            expert_train: self.expert_train.clone(),
            router_train: self.router_train.clone(),
            router_data: Some(full.into()),
            held_out: held_out.map(Into::into),
            stragglers: self.stragglers.clone(),
            out_dir: "run".into(),
        }
    }
}

/// Exact oracle over the manifest's full labelled dataset.
pub fn reference_oracle(manifest: &RunManifest) -> Result<(Samples, DiscreteDataset)> {
    let (_, full) = Samples::load(manifest.full_data()?)?;
    let labels = full
        .labels
        .clone()
        .ok_or_else(|| Error::Config("full dataset carries no partition labels".into()))?;
    let oracle = DiscreteDataset::uniform(&full.data)?.with_labels(labels, manifest.clusters)?;
    Ok((full, oracle))
}

/// Loads whatever `kind` needs from the run directory; a missing checkpoint
/// is reported with its path.
pub fn load_ensemble(manifest: &RunManifest, kind: FusionKind, use_ema: bool) -> Result<Ensemble> {
    let out = &manifest.out_dir;
    let mut ensemble = match kind {
        FusionKind::Oracle => Ensemble::new((0..manifest.clusters).map(|_| None).collect()),
        FusionKind::Monolithic => {
            let c = load_checkpoint(&checkpoint_path(out, WorkerRole::Monolithic))?;
            Ensemble::new((0..manifest.clusters).map(|_| None).collect())
                .with_monolithic(Box::new(c.denoiser(use_ema)?))
        }
        _ => {
            let mut experts: Vec<Option<Box<dyn VelocityModel>>> = Vec::with_capacity(manifest.clusters);
            for k in 0..manifest.clusters {
                let c = load_checkpoint(&checkpoint_path(out, WorkerRole::Expert(k)))?;
                experts.push(Some(Box::new(c.denoiser(use_ema)?)));
            }
            let r = load_checkpoint(&checkpoint_path(out, WorkerRole::Router))?;
            Ensemble::new(experts).with_router(Box::new(r.router(use_ema)?))
        }
    };
    if kind == FusionKind::Oracle {
        ensemble = ensemble.with_oracle(reference_oracle(manifest)?.1);
    }
    Ok(ensemble)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strategies: Vec<String>,
    /// Generated samples per strategy.
    pub samples: usize,
    pub steps: usize,
    pub projections: usize,
    /// Training rows and times forming the velocity validation grid.
    pub grid_rows: usize,
    pub grid_times: usize,
    /// Noise level for router accuracy.
    pub router_t: f64,
    pub use_ema: bool,
    pub per_sample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategies: ["monolithic", "top1", "top2", "full", "oracle"]
                .map(String::from)
                .to_vec(),
            samples: 512,
            steps: 32,
            projections: 128,
            grid_rows: 64,
            grid_times: 8,
            router_t: 0.1,
            use_ema: true,
            per_sample: true,
        }
    }
}

impl EvalConfig {
    pub fn kinds(&self) -> Result<Vec<FusionKind>> {
        self.strategies.iter().map(|s| s.parse()).collect()
    }
}

/// The ensemble's fused velocity field as a single model.
struct Fused<'a> {
    ensemble: &'a Ensemble,
    strategy: FusionStrategy,
}

impl VelocityModel for Fused<'_> {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor> {
        Ok(fuse_velocities(self.ensemble, xt, ts, self.strategy)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    /// Sliced W₂ between generated and held-out samples.
    pub w2: f64,
    /// Fused velocity MSE against the exact marginal velocity.
    pub velocity_mse: f64,
    /// `velocity_mse` over the zero predictor's MSE.
    pub velocity_ratio: f64,
    /// Expert selections over all steps and samples (empty if not routed).
    pub usage: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterMetrics {
    pub accuracy: f64,
    pub oracle_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub run_id: String,
    pub rows: Vec<StrategyMetrics>,
    pub router: Option<RouterMetrics>,
    /// Per-expert velocity MSE ratio against its cluster's exact velocity.
    pub expert_ratios: Vec<f64>,
}

fn join_counts(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join("/")
}

impl MetricsTable {
    /// `key=value` lines, one fact per line.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("run_id={}\n", self.run_id);
        for r in &self.rows {
            let p = &r.strategy;
            let _ = writeln!(s, "{p}.w2={:.6e}", r.w2);
            let _ = writeln!(s, "{p}.velocity_mse={:.6e}", r.velocity_mse);
            let _ = writeln!(s, "{p}.velocity_ratio={:.6e}", r.velocity_ratio);
            if !r.usage.is_empty() {
                let _ = writeln!(s, "{p}.usage={}", join_counts(&r.usage));
            }
        }
        if let Some(r) = &self.router {
            let _ = writeln!(s, "router.accuracy={:.6}", r.accuracy);
            let _ = writeln!(s, "router.oracle_kl={:.6e}", r.oracle_kl);
        }
        for (k, v) in self.expert_ratios.iter().enumerate() {
            let _ = writeln!(s, "expert_{k}.velocity_ratio={v:.6e}");
        }
        s
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let header = ["strategy", "w2", "vel_mse", "vel_ratio", "usage"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.strategy.clone(),
                    format!("{:.4}", r.w2),
                    format!("{:.4}", r.velocity_mse),
                    format!("{:.4}", r.velocity_ratio),
                    if r.usage.is_empty() {
                        "-".into()
                    } else {
                        join_counts(&r.usage)
                    },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| -> String {
            let mut s = String::new();
            for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
                if i == 0 || i == 4 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "{c:>w$}");
                }
                if i < 4 {
                    s.push_str("  ");
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&header.map(String::from));
        out.push_str(&line(&widths.map(|w| "-".repeat(w))));
        for row in &cells {
            out.push_str(&line(row));
        }
        if let Some(r) = &self.router {
            let _ = writeln!(out, "\nrouter accuracy {:.4}, oracle KL {:.4}", r.accuracy, r.oracle_kl);
        }
        out
    }

    pub fn row(&self, strategy: &str) -> Option<&StrategyMetrics> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

/// Scores every requested strategy of a finished run.
pub fn evaluate(manifest: &RunManifest, cfg: &EvalConfig, seed: u64) -> Result<MetricsTable> {
    let kinds = cfg.kinds()?;
    let held_path = manifest
        .held_out
        .as_deref()
        .ok_or_else(|| Error::Config("manifest has no `held_out` dataset".into()))?;
    let (_, held) = Samples::load(held_path)?;
    let (full, oracle) = reference_oracle(manifest)?;
    let schedule = NoiseSchedule::default();
    let rows: Vec<usize> = (0..cfg.grid_rows.min(full.len())).collect();
    let grid = ValidationGrid::new(
        &full.gather(&rows),
        &ValidationGrid::times(cfg.grid_times, schedule),
        &RngStream::from_label(seed, "eval/grid"),
    )?;
    let projections = RngStream::from_label(seed, "eval/projections");
    let noise = RngStream::from_label(seed, "eval/noise");
    let mut table = MetricsTable {
        run_id: manifest.run_id.clone(),
        rows: Vec::with_capacity(kinds.len()),
        router: None,
        expert_ratios: vec![],
    };
    for kind in kinds {
        let ensemble = load_ensemble(manifest, kind, cfg.use_ema)?;
        let strategy = FusionStrategy {
            kind,
            per_sample: cfg.per_sample,
        };
        strategy.validate(manifest.clusters)?;
        let (x, trace) = generate(
            &ensemble,
            cfg.samples,
            held.dim(),
            cfg.steps,
            strategy,
            &noise,
            schedule,
        )?;
        let w2 = wasserstein2_1d_sliced(&x, &held.data, cfg.projections, &mut projections.clone())?;
        let err = velocity_error(
            &Fused {
                ensemble: &ensemble,
                strategy,
            },
            &oracle,
            &grid,
            64,
        )?;
        let usage = match kind {
            FusionKind::Oracle | FusionKind::Monolithic => vec![],
            _ => expert_usage_report(&trace, manifest.clusters)?.overall,
        };
        table.rows.push(StrategyMetrics {
            strategy: kind.to_string(),
            w2,
            velocity_mse: err.model_mse,
            velocity_ratio: err.ratio(),
            usage,
        });
    }
    let out = &manifest.out_dir;
    if checkpoint_path(out, WorkerRole::Router).exists() {
        let router = load_checkpoint(&checkpoint_path(out, WorkerRole::Router))?.router(cfg.use_ema)?;
        let clean = ValidationGrid::new(
            &held.data,
            &[schedule.t_min],
            &RngStream::from_label(seed, "eval/held-clean"),
        )?;
        let labels = cluster_labels(&oracle, &clean)?;
        let noisy = ValidationGrid::new(
            &held.data,
            &[cfg.router_t],
            &RngStream::from_label(seed, "eval/held-noisy"),
        )?;
        table.router = Some(RouterMetrics {
            accuracy: router_accuracy(&router, &noisy.xt, cfg.router_t, &labels)?,
            oracle_kl: oracle_kl(&router, &oracle, &grid)?,
        });
    }
    for k in 0..manifest.clusters {
        let path = checkpoint_path(out, WorkerRole::Expert(k));
        if !path.exists() {
            continue;
        }
        let expert = load_checkpoint(&path)?.denoiser(cfg.use_ema)?;
        let target = OracleExpert {
            data: oracle.clone(),
            cluster: k,
        };
        table
            .expert_ratios
            .push(cluster_velocity_ratio(&expert, &target, &grid)?);
    }
    Ok(table)
}

/// Cluster id of each state under the oracle posterior at (nearly) zero noise.
fn cluster_labels(oracle: &DiscreteDataset, grid: &ValidationGrid) -> Result<Vec<usize>> {
    let routed = crate::sampler::OracleRouter(oracle.clone()).route(&grid.xt, &grid.ts)?;
    Ok(routed.into_iter().map(|o| o.argmax).collect())
}

fn cluster_velocity_ratio(model: &dyn VelocityModel, target: &OracleExpert, grid: &ValidationGrid) -> Result<f64> {
    let v = model.velocity(&grid.xt, &grid.ts)?;
    let u = target.velocity(&grid.xt, &grid.ts)?;
    let err: f64 = v.data().iter().zip(u.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let base: f64 = u.data().iter().map(|b| b * b).sum();
    Ok(err / base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_suite_is_tight() {
        let r = oracle_check(200, 3).unwrap();
        assert_eq!(r.trials, 200);
        assert!(r.max_residual <= 1e-8, "{}", r.max_residual);
        assert!(oracle_check(0, 3).is_err());
    }

    fn sample_table() -> MetricsTable {
        MetricsTable {
            run_id: "demo".into(),
            rows: vec![
                StrategyMetrics {
                    strategy: "top2".into(),
                    w2: 0.25,
                    velocity_mse: 1.5,
                    velocity_ratio: 0.125,
                    usage: vec![10, 22],
                },
                StrategyMetrics {
                    strategy: "oracle".into(),
                    w2: 0.0625,
                    velocity_mse: 0.0,
                    velocity_ratio: 0.0,
                    usage: vec![],
                },
            ],
            router: Some(RouterMetrics {
                accuracy: 0.9375,
                oracle_kl: 0.03125,
            }),
            expert_ratios: vec![0.5, 0.25],
        }
    }

    #[test]
    fn metrics_text_matches_golden() {
        let t = sample_table();
        assert_eq!(
            t.to_table(),
            "strategy      w2  vel_mse  vel_ratio  usage\n\
             --------  ------  -------  ---------  -----\n\
             top2      0.2500   1.5000     0.1250  10/22\n\
             oracle    0.0625   0.0000     0.0000  -\n\
             \n\
             router accuracy 0.9375, oracle KL 0.0312\n"
        );
        assert_eq!(
            t.to_key_values(),
            "run_id=demo\n\
             top2.w2=2.500000e-1\n\
             top2.velocity_mse=1.500000e0\n\
             top2.velocity_ratio=1.250000e-1\n\
             top2.usage=10/22\n\
             oracle.w2=6.250000e-2\n\
             oracle.velocity_mse=0.000000e0\n\
             oracle.velocity_ratio=0.000000e0\n\
             router.accuracy=0.937500\n\
             router.oracle_kl=3.125000e-2\n\
             expert_0.velocity_ratio=5.000000e-1\n\
             expert_1.velocity_ratio=2.500000e-1\n"
        );
    }

    #[test]
    fn partial_settings_keep_role_defaults() {
        let s = RunSettings::from_toml("run_id = \"x\"\n[router_train]\nsteps = 7\n").unwrap();
        assert_eq!(s.run_id, "x");
        assert_eq!(s.router_train.steps, 7);
        assert_eq!(s.router_train.learning_rate, TrainConfig::router().learning_rate);
        assert_eq!(s.expert_train, TrainConfig::expert());
        assert!(RunSettings::from_toml("expert_preset = 3").is_err());
        assert!(RunSettings::from_toml("mystery = 1").is_err());
    }

    #[test]
    fn default_strategies_parse() {
        let kinds = EvalConfig::default().kinds().unwrap();
        assert_eq!(kinds[2], FusionKind::TopK(2));
        let bad = EvalConfig {
            strategies: vec!["best".into()],
            ..EvalConfig::default()
        };
        assert!(bad.kinds().is_err());
    }
}
