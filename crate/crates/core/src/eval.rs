//! Desk-scale quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{forward_noise_slice, NoiseSchedule};
use crate::numeric::{RngStream, Tensor};
use crate::oracle::DiscreteDataset;
use crate::sampler::{RoutingModel, VelocityModel};

/// Exact squared 1-D W₂ between two empirical distributions of any sizes,
/// integrating the squared gap between their quantile functions.
pub fn wasserstein2_sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("wasserstein2", "empty sample set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Random unit directions, `[count, dim]`.
pub fn unit_projections(count: usize, dim: usize, stream: &mut RngStream) -> Tensor {
    let mut data = vec![0.0; count * dim];
    for row in data.chunks_mut(dim) {
        loop {
            stream.fill_normal(row);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    Tensor::new(&[count, dim], data).expect("projection shape")
}

fn project(x: &Tensor, u: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(u).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean over random unit projections of the 1-D W₂ between projected samples.
pub fn wasserstein2_1d_sliced(a: &Tensor, b: &Tensor, projections: usize, stream: &mut RngStream) -> Result<f64> {
    if a.is_empty() || b.is_empty() || projections == 0 {
        return Err(Error::contract(
            "wasserstein2_1d_sliced",
            "empty sample set or no projections",
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::contract(
            "wasserstein2_1d_sliced",
            format!("dimensions {} and {}", a.cols(), b.cols()),
        ));
    }
    let dirs = unit_projections(projections, a.cols(), stream);
    let mut sum = 0.0;
    for p in 0..projections {
        let u = dirs.row(p);
        sum += wasserstein2_sq_1d(&project(a, u), &project(b, u))?.sqrt();
    }
    Ok(sum / projections as f64)
}

/// Validation states `(x_t, t)` built from clean rows on a fixed time grid.
pub struct ValidationGrid {
    pub xt: Tensor,
    pub ts: Vec<f64>,
}

impl ValidationGrid {
    pub fn new(x0: &Tensor, times: &[f64], stream: &RngStream) -> Result<Self> {
        let d = x0.cols();
        let mut xt = Vec::with_capacity(x0.rows() * times.len() * d);
        let mut ts = Vec::with_capacity(x0.rows() * times.len());
        let mut eps = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for i in 0..x0.rows() {
            for (j, &t) in times.iter().enumerate() {
                stream.substream((i * times.len() + j) as u64).fill_normal(&mut eps);
                forward_noise_slice(x0.row(i), &eps, t, &mut buf);
                xt.extend_from_slice(&buf);
                ts.push(t);
            }
        }
        Ok(Self {
            xt: Tensor::new(&[ts.len(), d], xt)?,
            ts,
        })
    }

    /// `count` evenly spaced times in `[t_min, 1]`.
    pub fn times(count: usize, schedule: NoiseSchedule) -> Vec<f64> {
        if count == 1 {
            return vec![1.0];
        }
        (0..count)
            .map(|i| schedule.t_min + (1.0 - schedule.t_min) * i as f64 / (count - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityError {
    /// Mean over states of `‖v_model − v_oracle‖²`.
    pub model_mse: f64,
    /// Same for the zero predictor: mean `‖v_oracle‖²`.
    pub zero_mse: f64,
}

impl VelocityError {
    pub fn ratio(&self) -> f64 {
        self.model_mse / self.zero_mse
    }
}

pub fn velocity_error(
    model: &dyn VelocityModel,
    oracle: &DiscreteDataset,
    grid: &ValidationGrid,
    batch: usize,
) -> Result<VelocityError> {
    let d = grid.xt.cols();
    let n = grid.ts.len();
    let (mut model_sq, mut zero_sq) = (0.0, 0.0);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(n);
        let rows = Tensor::new(&[end - start, d], grid.xt.data()[start * d..end * d].to_vec())?;
        let v = model.velocity(&rows, &grid.ts[start..end])?;
        for (r, i) in (start..end).enumerate() {
            let u = oracle.marginal_velocity(grid.xt.row(i), grid.ts[i])?;
            model_sq += v.row(r).iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            zero_sq += u.iter().map(|b| b * b).sum::<f64>();
        }
    }
    Ok(VelocityError {
        model_mse: model_sq / n as f64,
        zero_mse: zero_sq / n as f64,
    })
}

/// Noised copies of `x0` at one fixed `t`.
pub fn noised_at(x0: &Tensor, t: f64, stream: &RngStream) -> Result<Tensor> {
    Ok(ValidationGrid::new(x0, &[t], stream)?.xt)
}

/// Fraction of rows whose router argmax equals the label.
pub fn router_accuracy(router: &dyn RoutingModel, xt: &Tensor, t: f64, labels: &[usize]) -> Result<f64> {
    let out = router.route(xt, &vec![t; xt.rows()])?;
    let hits = out.iter().zip(labels).filter(|(o, &l)| o.argmax == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average router distribution over rows.
pub fn mean_prediction(router: &dyn RoutingModel, xt: &Tensor, t: f64) -> Result<Vec<f64>> {
    let out = router.route(xt, &vec![t; xt.rows()])?;
    let mut mean = vec![0.0; router.clusters()];
    for o in &out {
        for (m, p) in mean.iter_mut().zip(&o.probabilities) {
            *m += p / out.len() as f64;
        }
    }
    Ok(mean)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p ‖ q)` in nats; `q` entries are floored at `e^-30`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max((-30f64).exp()).ln()))
        .sum()
}

/// Mean `KL(oracle posterior ‖ router)` over validation states.
pub fn oracle_kl(router: &dyn RoutingModel, oracle: &DiscreteDataset, grid: &ValidationGrid) -> Result<f64> {
    let out = router.route(&grid.xt, &grid.ts)?;
    let mut total = 0.0;
    for (i, o) in out.iter().enumerate() {
        let p = oracle.cluster_posterior(grid.xt.row(i), grid.ts[i])?;
        total += kl_divergence(&p, &o.probabilities);
    }
    Ok(total / out.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = gaussian(&mut RngStream::new(1, 1), &[50, 3]);
        let w = wasserstein2_1d_sliced(&a, &a, 16, &mut RngStream::new(2, 2)).unwrap();
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn translation_in_one_dimension() {
        let a = gaussian(&mut RngStream::new(1, 1), &[40, 1]);
        let b = a.map(|v| v - 2.5);
        let w = wasserstein2_1d_sliced(&a, &b, 5, &mut RngStream::new(3, 3)).unwrap();
        assert!((w - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        // {0, 1} vs {0, 0, 1, 1}: identical quantile functions
        assert!(wasserstein2_sq_1d(&[0.0, 1.0], &[1.0, 0.0, 1.0, 0.0]).unwrap().abs() < 1e-15);
        // {0} vs {0, 2}: half the mass moves by 2
        assert!((wasserstein2_sq_1d(&[0.0], &[0.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(wasserstein2_sq_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn gaussian_shift_matches_projection_average() {
        // N(0, I) vs N(μ, I): each 1-D slice is a pure shift by |⟨u, μ⟩|,
        // so the population value is E|⟨u, μ⟩| over random unit u
        let mu = [1.0, -0.5, 0.25, 2.0, 0.0, 0.75, -1.0, 0.5];
        let mut s = RngStream::new(11, 1);
        let dirs = unit_projections(100_000, 8, &mut s);
        let expected = (0..dirs.rows())
            .map(|p| dirs.row(p).iter().zip(&mu).map(|(u, m)| u * m).sum::<f64>().abs())
            .sum::<f64>()
            / dirs.rows() as f64;
        let a = gaussian(&mut RngStream::new(12, 1), &[10_000, 8]);
        let mut b = gaussian(&mut RngStream::new(13, 1), &[10_000, 8]);
        for row in b.data_mut().chunks_mut(8) {
            row.iter_mut().zip(&mu).for_each(|(x, m)| *x += m);
        }
        let w = wasserstein2_1d_sliced(&a, &b, 128, &mut RngStream::new(14, 1)).unwrap();
        assert!((w - expected).abs() <= 0.1 * expected, "{w} vs {expected}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(wasserstein2_1d_sliced(&a, &b, 4, &mut RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn kl_and_tv_basics() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((total_variation(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).abs() < 1e-15);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }
}
