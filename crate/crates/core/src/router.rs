//! Noise-aware expert classifier.
//!
//! The router reuses the denoiser backbone (patch embedding, timestep MLP,
//! modulated blocks) at reduced width, mean-pools the final tokens, normalizes
//! and projects to K logits. It never sees text embeddings.

use serde::{Deserialize, Serialize};

use crate::denoiser::{backbone, init_backbone, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numeric::{softmax_rows, Expand, Graph, RngStream, Tensor, Var};
use crate::params::{ParamSet, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub argmax: usize,
    /// Shannon entropy in nats.
    pub entropy: f64,
}

impl RouterOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax_rows(&logits, logits.len());
        Self::from_parts(logits, probabilities)
    }

    /// Wraps an externally computed distribution (oracle posteriors, stubs).
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let logits = probabilities
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Self::from_parts(logits, probabilities)
    }

    fn from_parts(logits: Vec<f64>, probabilities: Vec<f64>) -> Self {
        let argmax = argmax_lowest(&probabilities);
        let entropy = -probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        Self {
            probabilities,
            logits,
            argmax,
            entropy,
        }
    }

    pub fn clusters(&self) -> usize {
        self.probabilities.len()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Router presets paired with expert presets.
pub fn router_preset(name: &str) -> Result<DenoiserConfig> {
    match name {
        "router-nano" => Ok(router_nano()),
        "router-toy" => Ok(router_toy()),
        other => DenoiserConfig::preset(other),
    }
}

/// Pairs with `dit-nano`: half width, same depth.
pub fn router_nano() -> DenoiserConfig {
    DenoiserConfig {
        hidden_dim: 32,
        heads: 2,
        freq_dim: 32,
        ..DenoiserConfig::dit_nano()
    }
}

/// Pairs with `dit-toy`.
pub fn router_toy() -> DenoiserConfig {
    DenoiserConfig {
        hidden_dim: 16,
        heads: 2,
        freq_dim: 16,
        ..DenoiserConfig::dit_toy()
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    pub config: DenoiserConfig,
    pub clusters: usize,
    pub params: ParamSet,
}

impl Router {
    pub fn new(config: DenoiserConfig, clusters: usize, stream: &RngStream) -> Result<Self> {
        if config.cross_attention.is_some() {
            return Err(Error::Config("the router does not take text conditioning".into()));
        }
        if clusters == 0 {
            return Err(Error::Config("router needs at least one cluster".into()));
        }
        let mut params = init_backbone(&config, stream)?;
        params.push("head.weight", Tensor::zeros(&[config.hidden_dim, clusters]));
        params.push("head.bias", Tensor::zeros(&[clusters]));
        Ok(Self {
            config,
            clusters,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, clusters: usize, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), clusters, &RngStream::new(0, 0))?;
        reference.params.check_layout(&params, "router")?;
        Ok(Self {
            config,
            clusters,
            params,
        })
    }

    pub fn param_count(config: &DenoiserConfig, clusters: usize) -> usize {
        config.backbone_param_count() + config.hidden_dim * clusters + clusters
    }

    /// Logits `[B, K]` for a batch of latents.
    pub fn build(&self, g: &mut Graph, p: &ParamVars, x: &Tensor, ts: &[f64]) -> Result<Var> {
        let (h, _) = backbone(g, &self.config, p, x, ts, None)?;
        let t = self.config.tokens();
        let d = self.config.hidden_dim;
        let pool = g.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        let mut pooled = Vec::with_capacity(ts.len());
        for b in 0..ts.len() {
            let rows = g.slice(h, b * t, t, 0, d)?;
            pooled.push(g.matmul(pool, rows)?);
        }
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)?
        };
        let n = g.layer_norm(pooled);
        let w = p.get("head.weight")?;
        let bias = p.get("head.bias")?;
        let y = g.matmul(n, w)?;
        let be = g.expand_rows(bias, ts.len(), Expand::Tile)?;
        g.add(y, be)
    }

    pub fn route(&self, xt: &Tensor, t: f64) -> Result<RouterOutput> {
        if xt.len() != self.config.latent_len() {
            return Err(Error::contract(
                "route",
                format!(
                    "input {:?} does not match latent {}x{}x{}",
                    xt.shape(),
                    self.config.channels,
                    self.config.height,
                    self.config.width
                ),
            ));
        }
        Ok(self.route_batch(xt, &[t])?.remove(0))
    }

    /// Routes each row of `xts` (`[B, …]`) at its own timestep.
    pub fn route_batch(&self, xts: &Tensor, ts: &[f64]) -> Result<Vec<RouterOutput>> {
        let n = self.config.latent_len();
        if xts.len() != n * ts.len() {
            return Err(Error::contract(
                "route_batch",
                format!(
                    "{} inputs of shape {:?} for {} timesteps",
                    xts.len() / n.max(1),
                    xts.shape(),
                    ts.len()
                ),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let logits = self.build(&mut g, &p, xts, ts)?;
        let k = self.clusters;
        Ok(g.value(logits)
            .data()
            .chunks(k)
            .map(|row| RouterOutput::from_logits(row.to_vec()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian;

    fn random_router(seed: u64) -> Router {
        let mut r = Router::new(router_toy(), 3, &RngStream::new(seed, 1)).unwrap();
        let mut s = RngStream::new(seed, 2);
        for t in r.params.tensors_mut() {
            s.fill_normal(t.data_mut());
            *t = t.scale(0.3);
        }
        r
    }

    #[test]
    fn zero_head_routes_uniformly() {
        let r = Router::new(router_toy(), 4, &RngStream::new(1, 1)).unwrap();
        let x = gaussian(&mut RngStream::new(2, 2), &[1, 2, 4, 4]);
        let out = r.route(&x, 0.4).unwrap();
        assert!(out.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert_eq!(out.argmax, 0);
        assert!((out.entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_match_independent_softmax() {
        let r = random_router(3);
        let x = gaussian(&mut RngStream::new(2, 2), &[1, 32]);
        let out = r.route(&x, 0.7).unwrap();
        let m = out.logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = out.logits.iter().map(|l| (l - m).exp()).sum();
        for (p, l) in out.probabilities.iter().zip(&out.logits) {
            assert!((p - (l - m).exp() / z).abs() < 1e-12);
        }
        assert!((out.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(out.argmax, argmax_lowest(&out.logits));
    }

    #[test]
    fn batch_equals_single_calls_bitwise() {
        let r = random_router(4);
        let x = gaussian(&mut RngStream::new(5, 5), &[5, 32]);
        let ts = [0.1, 0.9, 0.5, 0.5, 0.999];
        let batch = r.route_batch(&x, &ts).unwrap();
        for (i, out) in batch.iter().enumerate() {
            let single = r
                .route(&Tensor::new(&[1, 32], x.row(i).to_vec()).unwrap(), ts[i])
                .unwrap();
            assert_eq!(&single, out);
        }
        let same = Tensor::new(&[2, 32], [x.row(0), x.row(0)].concat()).unwrap();
        let pair = r.route_batch(&same, &[0.3, 0.3]).unwrap();
        assert_eq!(pair[0], pair[1]);
    }

    #[test]
    fn shape_and_length_errors() {
        let r = random_router(1);
        assert!(r.route(&Tensor::zeros(&[1, 31]), 0.5).is_err());
        assert!(r.route_batch(&Tensor::zeros(&[2, 32]), &[0.5]).is_err());
        assert!(r.route(&Tensor::zeros(&[1, 32]), 1.5).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(RouterOutput::from_probabilities(vec![0.5, 0.5]).argmax, 0);
    }

    #[test]
    fn parameter_count_closed_form() {
        let r = Router::new(router_nano(), 8, &RngStream::new(0, 0)).unwrap();
        assert_eq!(r.params.count(), Router::param_count(&router_nano(), 8));
    }

    #[test]
    fn router_is_a_fraction_of_the_expert() {
        let pairs = [
            (DenoiserConfig::dit_b2(), DenoiserConfig::dit_s2()),
            (DenoiserConfig::dit_nano(), router_nano()),
            (DenoiserConfig::dit_toy(), router_toy()),
        ];
        for (expert, router) in pairs {
            let ratio = Router::param_count(&router, 8) as f64 / expert.param_count() as f64;
            assert!((0.2..=0.5).contains(&ratio), "{ratio}");
        }
    }
}
