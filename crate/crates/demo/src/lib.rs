//! Browser playground over a 2-D point cloud: partition it into clusters,
//! inspect the noise-aware cluster posterior at any state, and sample with
//! per-cluster oracle experts under a chosen fusion strategy.

use dflow::flow::NoiseSchedule;
use dflow::numeric::RngStream;
use dflow::oracle::DiscreteDataset;
use dflow::partition::{embed, hierarchical_partition, EmbedderKind};
use dflow::sampler::{generate, Ensemble, FusionKind, FusionStrategy, OracleExpert, OracleRouter, VelocityModel};
use dflow::toy::ToySpec;
use wasm_bindgen::prelude::*;

fn js(e: dflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    oracle: DiscreteDataset,
    points: Vec<f64>,
    labels: Vec<usize>,
}

#[wasm_bindgen]
impl Scene {
    /// Gaussian blobs in the plane, split into `clusters` groups by
    /// fine-then-coarse k-means.
    #[wasm_bindgen(constructor)]
    pub fn new(components: usize, samples: usize, clusters: usize, seed: u64) -> Result<Scene, JsError> {
        let spec = ToySpec {
            spread: 0.12,
            ..ToySpec::blobs(components, vec![2], samples, seed)
        };
        let data = spec.generate().map_err(js)?.data;
        let features = embed(&data, EmbedderKind::Identity).map_err(js)?;
        let fine = (4 * clusters).min(samples);
        let mut stream = RngStream::from_label(seed, "demo-partition");
        let partition = hierarchical_partition(&features, fine, clusters, 50, &mut stream).map_err(js)?;
        let oracle = DiscreteDataset::uniform(&data)
            .and_then(|d| d.with_labels(partition.assignments.clone(), clusters))
            .map_err(js)?;
        Ok(Scene {
            points: data.data().to_vec(),
            labels: partition.assignments,
            oracle,
        })
    }

    /// Flat `[x0, y0, x1, y1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| l as u32).collect()
    }

    pub fn clusters(&self) -> usize {
        self.oracle.clusters()
    }

    /// Cluster posterior at state `(x, y)` and time `t`, followed by the
    /// residual between the marginal velocity and its posterior-weighted
    /// per-cluster decomposition.
    pub fn posterior(&self, x: f64, y: f64, t: f64) -> Result<Vec<f64>, JsError> {
        let xt = [x, y];
        let mut p = self.oracle.cluster_posterior(&xt, t).map_err(js)?;
        p.push(self.oracle.decomposition_residual(&xt, t).map_err(js)?);
        Ok(p)
    }

    /// Marginal velocity at `(x, y, t)`.
    pub fn velocity(&self, x: f64, y: f64, t: f64) -> Result<Vec<f64>, JsError> {
        self.oracle.marginal_velocity(&[x, y], t).map_err(js)
    }

    /// Euler samples from noise using exact per-cluster experts fused by
    /// `strategy` (`top1`, `top2`, ..., `full`, `oracle`). Returns flat
    /// coordinates followed by the highest-weighted expert of each sample at
    /// the final step, or -1 when nothing was routed.
    pub fn sample(&self, strategy: &str, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        let kind: FusionKind = strategy.parse().map_err(js)?;
        let experts = (0..self.clusters())
            .map(|k| {
                Some(Box::new(OracleExpert {
                    data: self.oracle.clone(),
                    cluster: k,
                }) as Box<dyn VelocityModel>)
            })
            .collect();
        let ensemble = Ensemble::new(experts)
            .with_router(Box::new(OracleRouter(self.oracle.clone())))
            .with_oracle(self.oracle.clone());
        let stream = RngStream::from_label(seed, "demo-sample");
        let (x, trace) = generate(
            &ensemble,
            n,
            2,
            steps,
            FusionStrategy::new(kind),
            &stream,
            NoiseSchedule::default(),
        )
        .map_err(js)?;
        let mut out = x.data().to_vec();
        let last = trace.steps.last().map(|s| s.selections.as_slice()).unwrap_or(&[]);
        out.extend((0..n).map(|i| {
            last.get(i)
                .and_then(|s| s.experts.iter().zip(&s.weights).max_by(|a, b| a.1.total_cmp(b.1)))
                .map_or(-1.0, |(&e, _)| e as f64)
        }));
        Ok(out)
    }
}

/// Forward-noised copy of a point: `(1 - t)·x + t·ε`.
#[wasm_bindgen]
pub fn noise_point(x: f64, y: f64, t: f64, seed: u64) -> Vec<f64> {
    let mut eps = [0.0; 2];
    RngStream::new(seed, 0).fill_normal(&mut eps);
    [x, y].iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect()
}
