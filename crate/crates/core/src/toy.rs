//! Synthetic datasets standing in for image latents.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Isotropic Gaussian blobs with random means.
    GaussianMixture,
    /// Latent-shaped images holding one bright square per component location.
    GridShapes,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(Self::GaussianMixture),
            "grid-shapes" => Ok(Self::GridShapes),
            other => Err(Error::Config(format!(
                "unknown generator `{other}` (expected gaussian-mixture or grid-shapes)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub components: usize,
    /// Per-sample shape, e.g. `[C, H, W]` or `[d]`.
    pub sample_shape: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation within a component.
    pub spread: f64,
    /// Per-coordinate scale of component means (mixture) or square amplitude (shapes).
    pub scale: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::blobs(8, vec![2, 4, 4], 2048, 0)
    }
}

impl ToySpec {
    /// Well-separated Gaussian blobs: unit-scale means, spread 0.1.
    pub fn blobs(components: usize, sample_shape: Vec<usize>, samples: usize, seed: u64) -> Self {
        Self {
            kind: ToyKind::GaussianMixture,
            components,
            sample_shape,
            samples,
            seed,
            spread: 0.1,
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.samples == 0 || self.dim() == 0 {
            return Err(Error::Config(
                "toy spec needs at least one component, sample and dimension".into(),
            ));
        }
        if !(self.spread >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::Config("toy spread must be ≥ 0 and scale > 0".into()));
        }
        if self.kind == ToyKind::GridShapes {
            let [_, h, w] = self.sample_shape[..] else {
                return Err(Error::Config("grid-shapes needs a (C, H, W) sample shape".into()));
            };
            if h < 2 || w < 2 || self.components > (h / 2) * (w / 2) {
                return Err(Error::Config(format!(
                    "grid-shapes fits at most {} components in {h}x{w}",
                    (h / 2) * (w / 2)
                )));
            }
        }
        Ok(())
    }

    /// Component centres, `[components, d]`.
    pub fn centers(&self) -> Result<Tensor> {
        self.validate()?;
        let d = self.dim();
        let mut out = Tensor::zeros(&[self.components, d]);
        match self.kind {
            ToyKind::GaussianMixture => {
                let base = RngStream::from_label(self.seed, "toy/means");
                for k in 0..self.components {
                    let row = &mut out.data_mut()[k * d..(k + 1) * d];
                    base.substream(k as u64).fill_normal(row);
                    row.iter_mut().for_each(|v| *v *= self.scale);
                }
            }
            ToyKind::GridShapes => {
                let (c, h, w) = (self.sample_shape[0], self.sample_shape[1], self.sample_shape[2]);
                let cols = w / 2;
                for k in 0..self.components {
                    let (r0, c0) = (2 * (k / cols), 2 * (k % cols));
                    for ch in 0..c {
                        let sign = if (ch + k) % 2 == 0 { 1.0 } else { -1.0 };
                        for i in 0..2 {
                            for j in 0..2 {
                                out.data_mut()[k * d + ch * h * w + (r0 + i) * w + c0 + j] = sign * self.scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn draw(&self, label: &str, samples: usize) -> Result<Samples> {
        let centers = self.centers()?;
        let d = self.dim();
        let base = RngStream::from_label(self.seed, label);
        let mut data = Vec::with_capacity(samples * d);
        let mut labels = Vec::with_capacity(samples);
        let mut noise = vec![0.0; d];
        for i in 0..samples {
            let mut s = base.substream(i as u64);
            let k = s.below(self.components as u64) as usize;
            s.fill_normal(&mut noise);
            data.extend(centers.row(k).iter().zip(&noise).map(|(m, e)| m + self.spread * e));
            labels.push(k);
        }
        Samples::new(
            Tensor::new(&[samples, d], data)?,
            self.sample_shape.clone(),
            Some(labels),
        )
    }

    /// Draws the dataset; ground-truth component labels are retained.
    pub fn generate(&self) -> Result<Samples> {
        self.draw("toy/samples", self.samples)
    }

    /// Fresh draws from the same components (disjoint sample streams).
    pub fn held_out(&self, samples: usize) -> Result<Samples> {
        self.draw("toy/held-out", samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_component_labels_are_balanced() {
        let s = ToySpec::blobs(2, vec![4], 1000, 3).generate().unwrap();
        assert_eq!(s.len(), 1000);
        let ones = s.labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count() as f64;
        // binomial(1000, 1/2): σ ≈ 15.8
        assert!((ones - 500.0).abs() <= 3.0 * 250f64.sqrt(), "{ones}");
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = ToySpec::blobs(3, vec![2, 4, 4], 50, 9);
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!(
            a.to_bytes(9, None).unwrap(),
            spec.generate().unwrap().to_bytes(9, None).unwrap()
        );
        assert_ne!(
            a,
            ToySpec {
                seed: 10,
                ..spec.clone()
            }
            .generate()
            .unwrap()
        );
        assert_ne!(a.data, spec.held_out(50).unwrap().data);
    }

    #[test]
    fn grid_shapes_match_latent_shape() {
        let spec = ToySpec {
            kind: ToyKind::GridShapes,
            components: 4,
            sample_shape: vec![4, 8, 8],
            samples: 10,
            seed: 1,
            spread: 0.05,
            scale: 1.0,
        };
        let s = spec.generate().unwrap();
        assert_eq!(s.sample_shape, vec![4, 8, 8]);
        assert_eq!(s.dim(), crate::denoiser::DenoiserConfig::dit_nano().latent_len());
        let too_many = ToySpec { components: 17, ..spec };
        assert!(too_many.generate().is_err());
        assert!("spirals".parse::<ToyKind>().is_err());
    }
}
