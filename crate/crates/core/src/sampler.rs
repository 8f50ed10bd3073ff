//! Router-fused Euler sampling.
//!
//! At every step the router scores each sample, a fusion strategy picks and
//! weights experts, and the fused velocity drives one Euler step. The oracle
//! strategy bypasses all networks and integrates the exact marginal flow.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::flow::{euler_step_slice, NoiseSchedule};
use crate::numeric::{RngStream, Tensor};
use crate::oracle::DiscreteDataset;
use crate::router::{Router, RouterOutput};

/// Anything that maps `([B, d], t per row)` to `[B, d]` velocities.
pub trait VelocityModel {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor>;
}

/// Anything that scores rows of `[B, d]` against K clusters.
pub trait RoutingModel {
    fn clusters(&self) -> usize;
    fn route(&self, xt: &Tensor, ts: &[f64]) -> Result<Vec<RouterOutput>>;
}

impl VelocityModel for Denoiser {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.forward(xt, ts, None)
    }
}

/// A denoiser with one fixed text embedding shared by every sample.
pub struct TextConditioned {
    pub model: Denoiser,
    /// `[tokens, dim]`.
    pub text: Tensor,
}

impl VelocityModel for TextConditioned {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let mut rep = Vec::with_capacity(ts.len() * self.text.len());
        for _ in ts {
            rep.extend_from_slice(self.text.data());
        }
        let text = Tensor::new(&[ts.len() * self.text.rows(), self.text.cols()], rep)?;
        self.model.forward(xt, ts, Some(&text))
    }
}

impl RoutingModel for Router {
    fn clusters(&self) -> usize {
        self.clusters
    }

    fn route(&self, xt: &Tensor, ts: &[f64]) -> Result<Vec<RouterOutput>> {
        self.route_batch(xt, ts)
    }
}

fn per_row<F>(xt: &Tensor, ts: &[f64], mut f: F) -> Result<Tensor>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let d = xt.cols();
    let mut out = Vec::with_capacity(xt.len());
    for (b, &t) in ts.iter().enumerate() {
        out.extend(f(xt.row(b), t)?);
    }
    Tensor::new(&[ts.len(), d], out)
}

/// Exact marginal flow of a discrete dataset.
pub struct OracleVelocity(pub DiscreteDataset);

impl VelocityModel for OracleVelocity {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor> {
        per_row(xt, ts, |x, t| self.0.marginal_velocity(x, t))
    }
}

/// Exact flow of one cluster, standing in for a perfectly trained expert.
pub struct OracleExpert {
    pub data: DiscreteDataset,
    pub cluster: usize,
}

impl VelocityModel for OracleExpert {
    fn velocity(&self, xt: &Tensor, ts: &[f64]) -> Result<Tensor> {
        per_row(xt, ts, |x, t| self.data.per_cluster_velocity(x, t, self.cluster))
    }
}

/// Exact cluster posterior, standing in for a perfectly trained router.
pub struct OracleRouter(pub DiscreteDataset);

impl RoutingModel for OracleRouter {
    fn clusters(&self) -> usize {
        self.0.clusters()
    }

    fn route(&self, xt: &Tensor, ts: &[f64]) -> Result<Vec<RouterOutput>> {
        ts.iter()
            .enumerate()
            .map(|(b, &t)| {
                Ok(RouterOutput::from_probabilities(
                    self.0.cluster_posterior(xt.row(b), t)?,
                ))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Top1,
    TopK(usize),
    Full,
    Oracle,
    Monolithic,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionKind::Top1 => write!(f, "top1"),
            FusionKind::TopK(k) => write!(f, "top{k}"),
            FusionKind::Full => write!(f, "full"),
            FusionKind::Oracle => write!(f, "oracle"),
            FusionKind::Monolithic => write!(f, "monolithic"),
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Self::Top1),
            "full" => Ok(Self::Full),
            "oracle" => Ok(Self::Oracle),
            "monolithic" => Ok(Self::Monolithic),
            _ => s
                .strip_prefix("top")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(Self::TopK)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown strategy `{s}` (expected top1, topN, full, oracle or monolithic)"
                    ))
                }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    /// Each sample routes on its own; otherwise the batch shares the
    /// experts chosen from its mean router distribution.
    pub per_sample: bool,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        Self { kind, per_sample: true }
    }

    pub fn validate(&self, clusters: usize) -> Result<()> {
        if let FusionKind::TopK(k) = self.kind {
            if k == 0 || k > clusters {
                return Err(Error::Config(format!("top{k} needs 1 ≤ K' ≤ {clusters}")));
            }
        }
        Ok(())
    }
}

/// Experts (any may be missing), router, optional monolithic model and oracle
/// dataset, with per-model forward counters.
pub struct Ensemble {
    experts: Vec<Option<Box<dyn VelocityModel>>>,
    router: Option<Box<dyn RoutingModel>>,
    monolithic: Option<Box<dyn VelocityModel>>,
    oracle: Option<OracleVelocity>,
    expert_forwards: Vec<Cell<u64>>,
    monolithic_forwards: Cell<u64>,
}

impl Ensemble {
    pub fn new(experts: Vec<Option<Box<dyn VelocityModel>>>) -> Self {
        let k = experts.len();
        Self {
            experts,
            router: None,
            monolithic: None,
            oracle: None,
            expert_forwards: (0..k).map(|_| Cell::new(0)).collect(),
            monolithic_forwards: Cell::new(0),
        }
    }

    pub fn with_router(mut self, r: Box<dyn RoutingModel>) -> Self {
        self.router = Some(r);
        self
    }

    pub fn with_monolithic(mut self, m: Box<dyn VelocityModel>) -> Self {
        self.monolithic = Some(m);
        self
    }

    pub fn with_oracle(mut self, d: DiscreteDataset) -> Self {
        self.oracle = Some(OracleVelocity(d));
        self
    }

    pub fn clusters(&self) -> usize {
        self.experts.len()
    }

    /// Per-sample expert evaluations since the last reset, per expert.
    pub fn expert_forwards(&self) -> Vec<u64> {
        self.expert_forwards.iter().map(Cell::get).collect()
    }

    pub fn monolithic_forwards(&self) -> u64 {
        self.monolithic_forwards.get()
    }

    pub fn reset_counters(&self) {
        self.expert_forwards.iter().for_each(|c| c.set(0));
        self.monolithic_forwards.set(0);
    }

    fn expert(&self, k: usize) -> Result<&dyn VelocityModel> {
        self.experts
            .get(k)
            .and_then(|e| e.as_deref())
            .ok_or_else(|| Error::MissingCheckpoint(format!("expert {k}")))
    }

    fn routes(&self, xt: &Tensor, ts: &[f64]) -> Result<Vec<RouterOutput>> {
        let r = self
            .router
            .as_ref()
            .ok_or_else(|| Error::MissingCheckpoint("router".into()))?;
        if r.clusters() != self.clusters() {
            return Err(Error::contract(
                "fuse_velocities",
                format!(
                    "router scores {} clusters, {} experts loaded",
                    r.clusters(),
                    self.clusters()
                ),
            ));
        }
        r.route(xt, ts)
    }
}

/// Experts chosen for one sample at one step, with their fusion weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Top `k` indices by probability (ties → lower id) with renormalized
/// weights, returned in cluster-id order.
pub fn select_top(probabilities: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let mass: f64 = chosen.iter().map(|&i| probabilities[i]).sum();
    let weights = if mass > 0.0 {
        chosen.iter().map(|&i| probabilities[i] / mass).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    (chosen, weights)
}

fn selection(probs: &[f64], kind: FusionKind) -> Selection {
    let (experts, weights) = match kind {
        FusionKind::Top1 => select_top(probs, 1),
        FusionKind::TopK(k) => select_top(probs, k),
        _ => ((0..probs.len()).collect(), probs.to_vec()),
    };
    if matches!(kind, FusionKind::Top1 | FusionKind::TopK(_)) {
        let total: f64 = weights.iter().sum();
        assert!(
            weights.iter().all(|&w| w >= 0.0) && (total - 1.0).abs() <= 1e-12,
            "fusion weights must be a distribution, got {weights:?}"
        );
    }
    Selection {
        experts,
        weights,
        probabilities: probs.to_vec(),
    }
}

/// Fused velocity for a batch plus the per-sample expert selections (empty
/// for strategies that do not route).
pub fn fuse_velocities(
    ensemble: &Ensemble,
    xt: &Tensor,
    ts: &[f64],
    strategy: FusionStrategy,
) -> Result<(Tensor, Vec<Selection>)> {
    let b = ts.len();
    if xt.rows() != b || b == 0 {
        return Err(Error::contract(
            "fuse_velocities",
            format!("{} states for {} timesteps", xt.rows(), b),
        ));
    }
    match strategy.kind {
        FusionKind::Oracle => {
            let o = ensemble
                .oracle
                .as_ref()
                .ok_or_else(|| Error::Config("oracle strategy needs a reference dataset".into()))?;
            return Ok((o.velocity(xt, ts)?, vec![]));
        }
        FusionKind::Monolithic => {
            let m = ensemble
                .monolithic
                .as_deref()
                .ok_or_else(|| Error::MissingCheckpoint("monolithic model".into()))?;
            ensemble
                .monolithic_forwards
                .set(ensemble.monolithic_forwards.get() + b as u64);
            return Ok((m.velocity(xt, ts)?, vec![]));
        }
        _ => {}
    }
    let k = ensemble.clusters();
    strategy.validate(k)?;
    let routes = ensemble.routes(xt, ts)?;
    let selections: Vec<Selection> = if strategy.per_sample {
        routes
            .iter()
            .map(|r| selection(&r.probabilities, strategy.kind))
            .collect()
    } else {
        let mut mean = vec![0.0; k];
        for r in &routes {
            for (m, p) in mean.iter_mut().zip(&r.probabilities) {
                *m += p / b as f64;
            }
        }
        let shared = selection(&mean, strategy.kind);
        vec![shared; b]
    };

    let d = xt.cols();
    let mut out = vec![0.0; b * d];
    for e in 0..k {
        let rows: Vec<(usize, f64)> = selections
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.experts.iter().position(|&x| x == e).map(|j| (i, s.weights[j])))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let model = ensemble.expert(e)?;
        let mut sub = Vec::with_capacity(rows.len() * d);
        let mut sub_t = Vec::with_capacity(rows.len());
        for &(i, _) in &rows {
            sub.extend_from_slice(xt.row(i));
            sub_t.push(ts[i]);
        }
        let v = model.velocity(&Tensor::new(&[rows.len(), d], sub)?, &sub_t)?;
        ensemble.expert_forwards[e].set(ensemble.expert_forwards[e].get() + rows.len() as u64);
        for (j, &(i, w)) in rows.iter().enumerate() {
            for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Ok((Tensor::new(&[b, d], out)?, selections))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub selections: Vec<Selection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub strategy: Option<FusionKind>,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    /// One JSON object per step.
    pub fn to_json_lines(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("trace serializes") + "\n")
            .collect()
    }
}

/// Starting noise for sample `i` depends only on `(stream, i)`.
pub fn initial_noise(stream: &RngStream, n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for (i, row) in data.chunks_mut(dim).enumerate() {
        stream.substream(i as u64).fill_normal(row);
    }
    Tensor::new(&[n, dim], data).expect("noise shape")
}

/// Integrates from `x₁ ~ N(0, I)` to `t = 0` with fused velocities,
/// re-routing at every step. Returns `[n, dim]` samples and the trace.
pub fn generate(
    ensemble: &Ensemble,
    n: usize,
    dim: usize,
    steps: usize,
    strategy: FusionStrategy,
    stream: &RngStream,
    schedule: NoiseSchedule,
) -> Result<(Tensor, Trace)> {
    if steps == 0 || n == 0 {
        return Err(Error::contract("generate", "steps and sample count must be ≥ 1"));
    }
    let grid = schedule.sampling_grid(steps);
    let mut x = initial_noise(stream, n, dim);
    let mut trace = Trace {
        strategy: Some(strategy.kind),
        steps: Vec::with_capacity(steps),
    };
    for (i, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[0] - w[1]);
        let (v, selections) = fuse_velocities(ensemble, &x, &vec![t; n], strategy)?;
        euler_step_slice(x.data_mut(), v.data(), t, dt);
        trace.steps.push(TraceStep { step: i, t, selections });
    }
    Ok((x, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub overall: Vec<u64>,
    /// `by_decile[j][k]`: selections of expert `k` at `t ∈ [j/10, (j+1)/10)`
    /// (the last bucket includes 1).
    pub by_decile: Vec<Vec<u64>>,
}

pub fn expert_usage_report(trace: &Trace, clusters: usize) -> Result<UsageReport> {
    if trace.steps.is_empty() {
        return Err(Error::contract("expert_usage_report", "empty trace"));
    }
    let mut overall = vec![0u64; clusters];
    let mut by_decile = vec![vec![0u64; clusters]; 10];
    for s in &trace.steps {
        let bucket = ((s.t * 10.0) as usize).min(9);
        for sel in &s.selections {
            for &e in &sel.experts {
                overall[e] += 1;
                by_decile[bucket][e] += 1;
            }
        }
    }
    Ok(UsageReport { overall, by_decile })
}
