//! Linear noise path, velocity targets and the probability-flow Euler step.
//!
//! The corruption is `x_t = (1 - t)·x0 + t·ε`. Networks regress the direction
//! back to clean data, `x0 - x_t`, which for this path equals `t·(x0 - ε)`.
//! Because that target carries a factor of `t`, the matching ODE velocity is
//! `(x0 - x_t)/t` and one Euler step of size `dt` reads `x + (dt/t)·v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { t_min: DEFAULT_T_MIN }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::Range {
                op: "noise_schedule",
                value: t_min,
                range: "(0, 1)",
            });
        }
        Ok(Self { t_min })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// Training timestep, uniform on `[t_min, 1]`.
    pub fn sample_timestep(&self, stream: &mut RngStream) -> f64 {
        stream.uniform(self.t_min, 1.0)
    }

    /// Sampling grid: `steps` points spaced uniformly from 1 down to `t_min`,
    /// followed by 0. A single step is the jump 1 → 0.
    pub fn sampling_grid(&self, steps: usize) -> Vec<f64> {
        let mut grid: Vec<f64> = match steps {
            0 => vec![],
            1 => vec![1.0],
            _ => (0..steps)
                .map(|i| 1.0 + (self.t_min - 1.0) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        grid.push(0.0);
        grid
    }
}

fn check_unit(op: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range {
            op,
            value: t,
            range: "[0, 1]",
        });
    }
    Ok(())
}

pub fn forward_noise_slice(x0: &[f64], eps: &[f64], t: f64, out: &mut [f64]) {
    for ((o, a), e) in out.iter_mut().zip(x0).zip(eps) {
        *o = (1.0 - t) * a + t * e;
    }
}

/// `(1 - t)·x0 + t·eps`.
pub fn forward_noise(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_unit("forward_noise", t)?;
    x0.zip_map(eps, "forward_noise", |a, e| (1.0 - t) * a + t * e)
}

/// `x0 - xt`.
pub fn velocity_target(x0: &Tensor, xt: &Tensor) -> Result<Tensor> {
    x0.sub(xt)
}

pub fn euler_step_slice(xt: &mut [f64], v: &[f64], t: f64, dt: f64) {
    let r = dt / t;
    for (x, v) in xt.iter_mut().zip(v) {
        *x += r * v;
    }
}

/// `xt + (dt/t)·v`, moving from time `t` to `t - dt`.
pub fn euler_denoise_step(xt: &Tensor, v: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Range {
            op: "euler_denoise_step",
            value: t,
            range: "(0, 1]",
        });
    }
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::Range {
            op: "euler_denoise_step",
            value: dt,
            range: "(0, t]",
        });
    }
    let mut out = xt.clone();
    xt.check_same(v, "euler_denoise_step")?;
    euler_step_slice(out.data_mut(), v.data(), t, dt);
    Ok(out)
}
