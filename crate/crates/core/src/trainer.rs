//! Flow-matching regression for experts, cross-entropy for the router,
//! AdamW and EMA.
//!
//! Every sample's timestep and noise come from a stream keyed by
//! `(seed, role label, global sample id, epoch)`, so the noise a sample
//! receives does not depend on where it sits in a shard or a batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::Samples;
use crate::denoiser::{patchify, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::flow::{forward_noise_slice, NoiseSchedule};
use crate::numeric::{Graph, RngStream, Tensor, Var};
use crate::params::{ParamSet, ParamVars};
use crate::router::Router;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to 0 over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub accumulation: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub t_min: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::expert()
    }
}

impl TrainConfig {
    pub fn expert() -> Self {
        Self {
            batch_size: 32,
            accumulation: 1,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ema_decay: 0.995,
            steps: 2000,
            seed: 0,
            t_min: crate::flow::DEFAULT_T_MIN,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn router() -> Self {
        Self {
            learning_rate: 2e-3,
            schedule: LrSchedule::Cosine,
            ..Self::expert()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train config: {what}")));
        if self.batch_size == 0 || self.accumulation == 0 || self.steps == 0 {
            return bad("batch size, accumulation and steps must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay nonnegative");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("EMA decay must lie in (0, 1)");
        }
        NoiseSchedule::new(self.t_min)?;
        Ok(())
    }

    /// Copy of `self` with the keys present in `table` replaced.
    pub fn overlay(&self, table: &toml::Table) -> Result<Self> {
        let mut merged = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merged.extend(table.clone());
        let cfg: Self = merged
            .try_into()
            .map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_layout(grads, "optimizer_step")?;
    params.check_layout(&state.m, "optimizer_step")?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads.tensors()[i].data();
        let m = state.m.tensors_mut()[i].data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        }
        let v = state.v.tensors_mut()[i].data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        }
        let (m, v) = (state.m.tensors()[i].data(), state.v.tensors()[i].data());
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..p.len() {
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            p[j] -= lr * (update + weight_decay * p[j]);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub decay: f64,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
            updates: 0,
        }
    }

    /// `shadow ← β·shadow + (1 − β)·params`.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        self.shadow.check_layout(params, "ema_update")?;
        let b = self.decay;
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (s, p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = b * *s + (1.0 - b) * p;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

/// A network trained by velocity regression.
pub trait VelocityNet {
    /// Prediction for `xt` (`[B, d]`) in the layout produced by [`Self::target_layout`].
    fn predict(&self, g: &mut Graph, p: &ParamVars, xt: &Tensor, ts: &[f64]) -> Result<Var>;
    fn target_layout(&self, target: &Tensor) -> Result<Tensor>;
}

impl VelocityNet for Denoiser {
    fn predict(&self, g: &mut Graph, p: &ParamVars, xt: &Tensor, ts: &[f64]) -> Result<Var> {
        self.build(g, p, xt, ts, None)
    }

    fn target_layout(&self, target: &Tensor) -> Result<Tensor> {
        patchify(&self.config, target)
    }
}

/// Per-sample `(t, ε)` source.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    base: RngStream,
    schedule: NoiseSchedule,
}

impl NoiseSource {
    pub fn new(seed: u64, label: &str, t_min: f64) -> Result<Self> {
        Ok(Self {
            base: RngStream::from_label(seed, label),
            schedule: NoiseSchedule::new(t_min)?,
        })
    }

    pub fn draw(&self, global_id: usize, epoch: u64, dim: usize) -> (f64, Vec<f64>) {
        let mut s = self.base.substream(global_id as u64).substream(epoch);
        let t = self.schedule.sample_timestep(&mut s);
        let mut eps = vec![0.0; dim];
        s.fill_normal(&mut eps);
        (t, eps)
    }

    /// Timesteps and `[B, d]` noise for a batch of `(global id, epoch)` pairs.
    pub fn draw_batch(&self, keys: &[(usize, u64)], dim: usize) -> (Vec<f64>, Tensor) {
        let mut ts = Vec::with_capacity(keys.len());
        let mut eps = Vec::with_capacity(keys.len() * dim);
        for &(id, epoch) in keys {
            let (t, e) = self.draw(id, epoch, dim);
            ts.push(t);
            eps.extend(e);
        }
        (ts, Tensor::new(&[keys.len(), dim], eps).expect("noise batch"))
    }
}

fn noised(x0: &Tensor, ts: &[f64], eps: &Tensor) -> Result<Tensor> {
    x0.check_same(eps, "noise")?;
    if x0.rows() != ts.len() || ts.is_empty() {
        return Err(Error::contract(
            "loss",
            format!("{} samples with {} timesteps", x0.rows(), ts.len()),
        ));
    }
    let mut xt = Tensor::zeros(x0.shape());
    let d = x0.cols();
    for (b, &t) in ts.iter().enumerate() {
        forward_noise_slice(x0.row(b), eps.row(b), t, &mut xt.data_mut()[b * d..(b + 1) * d]);
    }
    Ok(xt)
}

/// `(1/B) Σ_b ‖v(x_t, t) − (x0 − x_t)‖²` and its parameter gradients.
pub fn expert_loss(
    net: &impl VelocityNet,
    params: &ParamSet,
    x0: &Tensor,
    ts: &[f64],
    eps: &Tensor,
) -> Result<(f64, ParamSet)> {
    if x0.is_empty() {
        return Err(Error::contract("expert_loss", "empty batch"));
    }
    let xt = noised(x0, ts, eps)?;
    let target = net.target_layout(&x0.sub(&xt)?)?;
    let mut g = Graph::new();
    let p = params.load(&mut g, true);
    let pred = net.predict(&mut g, &p, &xt, ts)?;
    let tv = g.constant(target);
    let diff = g.sub(pred, tv)?;
    let mse = g.mean_sq(diff);
    let per_sample = x0.cols() as f64;
    let loss = g.scale(mse, per_sample);
    g.backward(loss);
    Ok((g.value(loss).item(), params.gradients(&g, &p)))
}

/// Mean `−log p(label | x_t, t)` with log-probabilities floored at −30.
pub fn router_loss(
    router: &Router,
    params: &ParamSet,
    x0: &Tensor,
    labels: &[usize],
    ts: &[f64],
    eps: &Tensor,
) -> Result<(f64, ParamSet)> {
    if x0.is_empty() || labels.len() != x0.rows() {
        return Err(Error::contract("router_loss", "labels must match a nonempty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= router.clusters) {
        return Err(Error::contract(
            "router_loss",
            format!("label {bad} outside 0..{}", router.clusters),
        ));
    }
    let xt = noised(x0, ts, eps)?;
    let mut g = Graph::new();
    let p = params.load(&mut g, true);
    let logits = router.build(&mut g, &p, &xt, ts)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss);
    Ok((g.value(loss).item(), params.gradients(&g, &p)))
}

/// Shuffled passes over `n` rows; each row is visited once per epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    base: RngStream,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64, label: &str) -> Self {
        let base = RngStream::from_label(seed, label);
        let order = Self::permutation(n, &base, 0);
        Self {
            n,
            base,
            epoch: 0,
            pos: 0,
            order,
        }
    }

    fn permutation(n: usize, base: &RngStream, epoch: u64) -> Vec<usize> {
        let mut s = base.substream(epoch);
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = s.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }

    /// Next `size` `(row, epoch)` pairs.
    pub fn next_batch(&mut self, size: usize) -> Vec<(usize, u64)> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.pos = 0;
                self.order = Self::permutation(self.n, &self.base, self.epoch);
            }
            out.push((self.order[self.pos], self.epoch));
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

impl StepRecord {
    /// `step<TAB>loss<TAB>lr<TAB>wallclock_ms`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6e}\t{}",
            self.step, self.loss, self.lr, self.wallclock_ms
        )
    }
}

/// Parameters, EMA shadow and step count after training.
pub struct TrainOutcome {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub steps: u64,
}

type BatchLoss<'a> = dyn Fn(&ParamSet, &Tensor, &[usize], &[f64], &Tensor) -> Result<(f64, ParamSet)> + 'a;

/// Generic loop: micro-batch gradients are averaged over `accumulation`
/// micro-batches before each optimizer step.
fn train_loop(
    mut params: ParamSet,
    data: &Samples,
    cfg: &TrainConfig,
    role: &str,
    loss_fn: &BatchLoss<'_>,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let noise = NoiseSource::new(cfg.seed, &format!("{role}/sample"), cfg.t_min)?;
    let mut sampler = EpochSampler::new(data.len(), cfg.seed, &format!("{role}/order"));
    let mut opt = OptimizerState::new(&params);
    let mut ema = EmaState::new(&params, cfg.ema_decay);
    let start = Instant::now();
    let d = data.dim();
    for step in 0..cfg.steps {
        let mut total: Option<ParamSet> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.accumulation {
            let picks = sampler.next_batch(cfg.batch_size);
            let rows: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let keys: Vec<(usize, u64)> = picks.iter().map(|&(r, e)| (data.ids[r], e)).collect();
            let x0 = data.gather(&rows);
            let labels: Vec<usize> = match &data.labels {
                Some(l) => rows.iter().map(|&r| l[r]).collect(),
                None => vec![],
            };
            let (ts, eps) = noise.draw_batch(&keys, d);
            let (l, g) = loss_fn(&params, &x0, &labels, &ts, &eps)?;
            loss += l / cfg.accumulation as f64;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().iter_mut().zip(g.tensors()) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        if cfg.accumulation > 1 {
            let s = 1.0 / cfg.accumulation as f64;
            for t in grads.tensors_mut() {
                *t = t.scale(s);
            }
        }
        let lr = cfg.lr_at(step);
        optimizer_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay)?;
        ema.update(&params)?;
        observer(&StepRecord {
            step: step + 1,
            loss,
            lr,
            wallclock_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome {
        params,
        ema: ema.shadow,
        steps: cfg.steps,
    })
}

fn check_shape(data: &Samples, config: &DenoiserConfig) -> Result<()> {
    if data.dim() != config.latent_len() {
        return Err(Error::Config(format!(
            "samples of shape {:?} do not fit latent {}x{}x{}",
            data.sample_shape, config.channels, config.height, config.width
        )));
    }
    Ok(())
}

/// Trains one expert on one cluster's samples (or, with `cluster = None`, a
/// monolithic model on everything).
pub fn train_expert(
    data: &Samples,
    config: &DenoiserConfig,
    cfg: &TrainConfig,
    cluster: Option<usize>,
    clusters: usize,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    check_shape(data, config)?;
    if let (Some(k), Some(labels)) = (cluster, &data.labels) {
        if let Some(&other) = labels.iter().find(|&&l| l != k) {
            return Err(Error::Config(format!(
                "shard for cluster {k} contains a sample labelled {other}"
            )));
        }
    }
    if cluster.is_some_and(|k| k >= clusters) {
        return Err(Error::Config(format!(
            "cluster {} outside 0..{clusters}",
            cluster.unwrap()
        )));
    }
    let role = match cluster {
        Some(k) => format!("expert/{k}"),
        None => "monolithic".to_string(),
    };
    let init = RngStream::from_label(cfg.seed, &format!("{role}/init"));
    let model = Denoiser::new(config.clone(), &init)?;
    let loss_fn =
        |p: &ParamSet, x0: &Tensor, _: &[usize], ts: &[f64], eps: &Tensor| expert_loss(&model, p, x0, ts, eps);
    let out = train_loop(model.params.clone(), data, cfg, &role, &loss_fn, observer)?;
    Ok(Checkpoint {
        kind: if cluster.is_some() {
            ModelKind::Expert
        } else {
            ModelKind::Monolithic
        },
        config: config.clone(),
        cluster,
        clusters,
        seed: cfg.seed,
        step: out.steps,
        data_digest: data.digest(),
        params: out.params,
        ema: out.ema,
    })
}

/// Trains the router on the full labelled dataset.
pub fn train_router(
    data: &Samples,
    config: &DenoiserConfig,
    clusters: usize,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    check_shape(data, config)?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("router training needs cluster labels".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= clusters) {
        return Err(Error::Config(format!("label {bad} outside 0..{clusters}")));
    }
    let init = RngStream::from_label(cfg.seed, "router/init");
    let router = Router::new(config.clone(), clusters, &init)?;
    let loss_fn =
        |p: &ParamSet, x0: &Tensor, l: &[usize], ts: &[f64], eps: &Tensor| router_loss(&router, p, x0, l, ts, eps);
    let out = train_loop(router.params.clone(), data, cfg, "router", &loss_fn, observer)?;
    Ok(Checkpoint {
        kind: ModelKind::Router,
        config: config.clone(),
        cluster: None,
        clusters,
        seed: cfg.seed,
        step: out.steps,
        data_digest: data.digest(),
        params: out.params,
        ema: out.ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian;
    use crate::router::router_toy;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn overlay_keeps_unset_fields() {
        let t: toml::Table = toml::from_str("steps = 5\nbatch_size = 4").unwrap();
        let c = TrainConfig::router().overlay(&t).unwrap();
        assert_eq!((c.steps, c.batch_size, c.learning_rate), (5, 4, 2e-3));
        assert_eq!(c.schedule, LrSchedule::Cosine);
        let bad: toml::Table = toml::from_str("steps = 0").unwrap();
        assert!(TrainConfig::expert().overlay(&bad).is_err());
        let typo: toml::Table = toml::from_str("stepz = 3").unwrap();
        assert!(TrainConfig::expert().overlay(&typo).is_err());
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = scalar_set(0.7);
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &scalar_set(0.0), &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.tensors()[0].data(), &[0.7]);
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut p = scalar_set(0.0);
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &scalar_set(1.0), &mut st, 0.1, 0.0).unwrap();
        // m̂ = 1, v̂ = 1, step = lr / (1 + eps)
        let want = -0.1 / (1.0 + ADAM_EPS);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = scalar_set(2.0);
        let mut st = OptimizerState::new(&p);
        for _ in 0..5 {
            optimizer_step(&mut p, &scalar_set(0.0), &mut st, 0.1, 0.5).unwrap();
        }
        assert!((p.tensors()[0].data()[0] - 2.0 * 0.95f64.powi(5)).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut p = scalar_set(0.0);
        let mut st = OptimizerState::new(&p);
        let err = optimizer_step(&mut p, &scalar_set(f64::NAN), &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn ema_limits_and_geometric_series() {
        let target = scalar_set(3.0);
        let mut e0 = EmaState::new(&scalar_set(1.0), 0.5);
        e0.decay = 1e-300;
        e0.update(&target).unwrap();
        assert!((e0.shadow.tensors()[0].data()[0] - 3.0).abs() < 1e-12);

        let beta = 0.9;
        let mut e = EmaState::new(&scalar_set(1.0), beta);
        let n = 17;
        for _ in 0..n {
            e.update(&target).unwrap();
        }
        let closed = beta.powi(n) * 1.0 + (1.0 - beta.powi(n)) * 3.0;
        assert!((e.shadow.tensors()[0].data()[0] - closed).abs() < 1e-12);

        let mut frozen = EmaState::new(&scalar_set(1.0), 1.0);
        frozen.update(&target).unwrap();
        assert_eq!(frozen.shadow.tensors()[0].data(), &[1.0]);

        let mut wrong = ParamSet::new();
        wrong.push("w", Tensor::zeros(&[2]));
        assert!(e.update(&wrong).is_err());
    }

    struct Perfect {
        x0: Tensor,
    }

    impl VelocityNet for Perfect {
        fn predict(&self, g: &mut Graph, _: &ParamVars, xt: &Tensor, _: &[f64]) -> Result<Var> {
            Ok(g.constant(self.x0.sub(xt)?))
        }

        fn target_layout(&self, t: &Tensor) -> Result<Tensor> {
            Ok(t.clone())
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut s = RngStream::new(1, 1);
        let x0 = gaussian(&mut s, &[4, 6]);
        let eps = gaussian(&mut s, &[4, 6]);
        let (l, _) = expert_loss(
            &Perfect { x0: x0.clone() },
            &scalar_set(0.0),
            &x0,
            &[0.1, 0.4, 0.7, 1.0],
            &eps,
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_network_loss_is_scaled_noise_gap() {
        let m = Denoiser::new(DenoiserConfig::dit_toy(), &RngStream::new(1, 1)).unwrap();
        let mut s = RngStream::new(2, 2);
        let x0 = gaussian(&mut s, &[3, 32]);
        let eps = gaussian(&mut s, &[3, 32]);
        let ts = [0.2, 0.5, 0.9];
        let (l, _) = expert_loss(&m, &m.params, &x0, &ts, &eps).unwrap();
        let direct: f64 = (0..3)
            .map(|b| {
                ts[b]
                    * ts[b]
                    * x0.row(b)
                        .iter()
                        .zip(eps.row(b))
                        .map(|(a, e)| (a - e).powi(2))
                        .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - direct).abs() < 1e-12 * direct);
        assert!(expert_loss(&m, &m.params, &Tensor::zeros(&[0, 32]), &[], &Tensor::zeros(&[0, 32])).is_err());
    }

    #[test]
    fn uniform_router_loss_is_log_k() {
        let r = Router::new(router_toy(), 5, &RngStream::new(1, 1)).unwrap();
        let mut s = RngStream::new(2, 2);
        let x0 = gaussian(&mut s, &[4, 32]);
        let eps = gaussian(&mut s, &[4, 32]);
        let (l, _) = router_loss(&r, &r.params, &x0, &[0, 1, 4, 2], &[0.1, 0.2, 0.3, 0.4], &eps).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(router_loss(&r, &r.params, &x0, &[0, 1, 5, 2], &[0.1; 4], &eps).is_err());
    }

    #[test]
    fn confident_router_loss_vanishes_and_clamps() {
        let mut r = Router::new(router_toy(), 2, &RngStream::new(1, 1)).unwrap();
        *r.params.get_mut("head.bias").unwrap() = Tensor::new(&[2], vec![60.0, 0.0]).unwrap();
        let x0 = Tensor::zeros(&[2, 32]);
        let eps = gaussian(&mut RngStream::new(3, 3), &[2, 32]);
        let (right, _) = router_loss(&r, &r.params, &x0, &[0, 0], &[0.5, 0.5], &eps).unwrap();
        assert!(right < 1e-20);
        let (wrong, _) = router_loss(&r, &r.params, &x0, &[1, 1], &[0.5, 0.5], &eps).unwrap();
        assert_eq!(wrong, 30.0);
    }

    #[test]
    fn epoch_sampler_visits_each_row_once_per_epoch() {
        let mut s = EpochSampler::new(7, 1, "x");
        let picks = s.next_batch(14);
        for e in 0..2u64 {
            let mut rows: Vec<usize> = picks.iter().filter(|p| p.1 == e).map(|p| p.0).collect();
            rows.sort();
            assert_eq!(rows, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 10,
            ..TrainConfig::router()
        };
        assert_eq!(cfg.lr_at(0), cfg.learning_rate);
        assert!(cfg.lr_at(10).abs() < 1e-18);
        assert!((cfg.lr_at(5) - cfg.learning_rate / 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected_before_training() {
        let data = Samples::new(Tensor::zeros(&[4, 32]), vec![2, 4, 4], None).unwrap();
        let mut cfg = TrainConfig::expert();
        cfg.ema_decay = 1.0;
        let r = train_expert(&data, &DenoiserConfig::dit_toy(), &cfg, Some(0), 2, &mut |_| {
            panic!("trained")
        });
        assert!(matches!(r, Err(Error::Config(_))));
        let small = Samples::new(Tensor::zeros(&[4, 8]), vec![8], None).unwrap();
        let r = train_expert(
            &small,
            &DenoiserConfig::dit_toy(),
            &TrainConfig::expert(),
            Some(0),
            2,
            &mut |_| panic!("trained"),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let mixed = Samples::new(Tensor::zeros(&[2, 32]), vec![32], Some(vec![0, 1])).unwrap();
        let r = train_expert(
            &mixed,
            &DenoiserConfig::dit_toy(),
            &TrainConfig::expert(),
            Some(0),
            2,
            &mut |_| panic!("trained"),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
