//! Exact marginal flow over a finite weighted dataset.
//!
//! With `p_t(x_t | x0) = N((1 - t)·x0, t²·I)` the posterior over training
//! points is a softmax of scaled squared distances, and the marginal velocity
//! is `E[x0 | x_t] - x_t`. Splitting the dataset into labelled clusters gives
//! the per-cluster flows and cluster posteriors whose weighted sum must
//! reproduce the global flow exactly. Everything runs in log space so that
//! `t ≪ 1` and far-field queries stay finite.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDataset {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    labels: Option<Vec<usize>>,
    clusters: usize,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_time(op: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Range {
            op,
            value: t,
            range: "(0, 1]",
        });
    }
    Ok(())
}

impl DiscreteDataset {
    /// Equal weights `1/N`. `points` is `[N, d]`.
    pub fn uniform(points: &Tensor) -> Result<Self> {
        let n = points.rows();
        Self::weighted(points, vec![1.0 / n as f64; n])
    }

    pub fn weighted(points: &Tensor, weights: Vec<f64>) -> Result<Self> {
        let (n, dim) = (points.rows(), points.cols());
        if n == 0 {
            return Err(Error::contract("dataset", "no points"));
        }
        if weights.len() != n {
            return Err(Error::contract(
                "dataset",
                format!("{n} points but {} weights", weights.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("dataset", "weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(
                "dataset",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(Self {
            dim,
            points: points.data().to_vec(),
            weights,
            labels: None,
            clusters: 1,
        })
    }

    /// Attach 0-based cluster labels; every cluster in `0..k` must be nonempty.
    pub fn with_labels(mut self, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::contract(
                "dataset",
                format!("{} points but {} labels", self.len(), labels.len()),
            ));
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::contract("dataset", format!("label {l} outside 0..{k}")));
            }
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract("dataset", format!("cluster {empty} is empty")));
        }
        self.labels = Some(labels);
        self.clusters = k;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn points(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.points.clone()).expect("consistent")
    }

    fn require_labels(&self, op: &'static str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract(op, "dataset has no cluster labels"))
    }

    /// Total weight of each cluster.
    pub fn cluster_priors(&self) -> Result<Vec<f64>> {
        let labels = self.require_labels("cluster_priors")?;
        let mut p = vec![0.0; self.clusters];
        for (&l, w) in labels.iter().zip(&self.weights) {
            p[l] += w;
        }
        Ok(p)
    }

    /// Sub-dataset of cluster `k` with weights renormalized inside the cluster.
    pub fn restrict(&self, k: usize) -> Result<Self> {
        let labels = self.require_labels("restrict")?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            return Err(Error::contract("restrict", format!("cluster {k} is empty")));
        }
        let mass: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        let mut pts = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            pts.extend_from_slice(self.point(i));
        }
        let mut weights: Vec<f64> = idx.iter().map(|&i| self.weights[i] / mass).collect();
        // absorb rounding so the sum is exactly representable as 1
        let drift = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::weighted(&Tensor::new(&[idx.len(), self.dim], pts)?, weights)
    }

    fn check_query(&self, op: &'static str, xt: &[f64], t: f64) -> Result<()> {
        check_time(op, t)?;
        if xt.len() != self.dim {
            return Err(Error::contract(
                op,
                format!("query has dimension {}, dataset {}", xt.len(), self.dim),
            ));
        }
        Ok(())
    }

    fn log_terms(&self, xt: &[f64], t: f64) -> Vec<f64> {
        let a = 1.0 - t;
        let inv = 1.0 / (2.0 * t * t);
        (0..self.len())
            .map(|i| {
                let d2: f64 = self.point(i).iter().zip(xt).map(|(p, x)| (x - a * p).powi(2)).sum();
                -d2 * inv + self.weights[i].ln()
            })
            .collect()
    }

    /// Normalized log posterior `log p(x0_i | x_t)` over training points.
    pub fn log_posterior_weights(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_query("log_posterior_weights", xt, t)?;
        let mut lw = self.log_terms(xt, t);
        let z = log_sum_exp(lw.iter().copied());
        lw.iter_mut().for_each(|v| *v -= z);
        Ok(lw)
    }

    /// `E[x0 | x_t]`.
    pub fn posterior_mean(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let lw = self.log_posterior_weights(xt, t)?;
        Ok(self.weighted_mean(&lw, |_| true))
    }

    fn weighted_mean(&self, lw: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, l) in lw.iter().enumerate() {
            if !keep(i) {
                continue;
            }
            let w = l.exp();
            if w == 0.0 {
                continue;
            }
            for (m, p) in m.iter_mut().zip(self.point(i)) {
                *m += w * p;
            }
        }
        m
    }

    /// `Σ_i w_i (x0_i - x_t) = E[x0 | x_t] - x_t`.
    pub fn marginal_velocity(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut m = self.posterior_mean(xt, t)?;
        m.iter_mut().zip(xt).for_each(|(m, x)| *m -= x);
        Ok(m)
    }

    /// `p_t(k | x_t)` for every cluster.
    pub fn cluster_posterior(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let labels = self.require_labels("cluster_posterior")?;
        self.check_query("cluster_posterior", xt, t)?;
        let terms = self.log_terms(xt, t);
        let z = log_sum_exp(terms.iter().copied());
        Ok((0..self.clusters)
            .map(|k| {
                let lk = log_sum_exp(terms.iter().zip(labels).filter(move |(_, &l)| l == k).map(|(w, _)| *w));
                (lk - z).exp()
            })
            .collect())
    }

    /// Marginal velocity of the cluster-`k` sub-dataset.
    pub fn per_cluster_velocity(&self, xt: &[f64], t: f64, k: usize) -> Result<Vec<f64>> {
        let labels = self.require_labels("per_cluster_velocity")?;
        self.check_query("per_cluster_velocity", xt, t)?;
        if k >= self.clusters {
            return Err(Error::contract(
                "per_cluster_velocity",
                format!("cluster {k} outside 0..{}", self.clusters),
            ));
        }
        let mut lw = self.log_terms(xt, t);
        let z = log_sum_exp(lw.iter().zip(labels).filter(|(_, &l)| l == k).map(|(w, _)| *w));
        lw.iter_mut().for_each(|v| *v -= z);
        let mut m = self.weighted_mean(&lw, |i| labels[i] == k);
        m.iter_mut().zip(xt).for_each(|(m, x)| *m -= x);
        Ok(m)
    }

    /// `‖Σ_k p(k|x_t)·u_k − u‖ / (1 + ‖u‖)`.
    pub fn decomposition_residual(&self, xt: &[f64], t: f64) -> Result<f64> {
        let post = self.cluster_posterior(xt, t)?;
        let global = self.marginal_velocity(xt, t)?;
        let mut fused = vec![0.0; self.dim];
        for (k, p) in post.iter().enumerate() {
            let u = self.per_cluster_velocity(xt, t, k)?;
            fused.iter_mut().zip(&u).for_each(|(f, u)| *f += p * u);
        }
        let diff: f64 = fused
            .iter()
            .zip(&global)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = global.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(diff / (1.0 + norm))
    }
}
