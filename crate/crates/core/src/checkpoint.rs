//! Trained model artifacts: parameters, EMA shadow and provenance.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, payload_bytes, payload_values, round_f32, sha256_hex};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ParamSet;
use crate::router::Router;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PARISCKP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Expert,
    Monolithic,
    Router,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: DenoiserConfig,
    /// Expert cluster id; `None` for routers and monolithic models.
    pub cluster: Option<usize>,
    /// Cluster count K (router output width, or the run's K for experts).
    pub clusters: usize,
    pub seed: u64,
    pub step: u64,
    /// SHA-256 of the training data this model saw.
    pub data_digest: String,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    fn value_count(&self) -> usize {
        2 * self
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: DenoiserConfig,
    pub cluster: Option<usize>,
    pub clusters: usize,
    pub seed: u64,
    pub step: u64,
    pub data_digest: String,
    pub params: ParamSet,
    pub ema: ParamSet,
}

impl Checkpoint {
    /// Parameter values as they will be after a store/load round trip.
    pub fn rounded(&self) -> Self {
        let round = |p: &ParamSet| {
            let mut out = p.clone();
            for t in out.tensors_mut() {
                *t = t.map(round_f32);
            }
            out
        };
        Self {
            params: round(&self.params),
            ema: round(&self.ema),
            ..self.clone()
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut values = Vec::with_capacity(2 * self.params.count());
        for t in self.params.tensors().iter().chain(self.ema.tensors()) {
            values.extend_from_slice(t.data());
        }
        payload_bytes(&values)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: container::FORMAT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            cluster: self.cluster,
            clusters: self.clusters,
            seed: self.seed,
            step: self.step,
            data_digest: self.data_digest.clone(),
            digest: sha256_hex(&self.payload()),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.params.same_layout(&self.ema) {
            return Err(Error::contract(
                "store_checkpoint",
                "EMA layout differs from parameters",
            ));
        }
        let payload = self.payload();
        let mut header = self.header();
        header.digest = sha256_hex(&payload);
        container::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = container::decode(bytes, CHECKPOINT_MAGIC, path)?;
        container::verify_payload(payload, &header.digest, header.value_count(), path)?;
        let values = payload_values(payload);
        let mut offset = 0;
        let mut take = |entries: &[TensorEntry]| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                set.push(
                    e.name.clone(),
                    Tensor::new(&e.shape, values[offset..offset + n].to_vec())?,
                );
                offset += n;
            }
            Ok(set)
        };
        let params = take(&header.tensors)?;
        let ema = take(&header.tensors)?;
        Ok(Self {
            kind: header.kind,
            config: header.config,
            cluster: header.cluster,
            clusters: header.clusters,
            seed: header.seed,
            step: header.step,
            data_digest: header.data_digest,
            params,
            ema,
        })
    }

    /// Denoiser built from the EMA shadow (or live parameters).
    pub fn denoiser(&self, use_ema: bool) -> Result<Denoiser> {
        if self.kind == ModelKind::Router {
            return Err(Error::contract("checkpoint", "router checkpoint used as a denoiser"));
        }
        let p = if use_ema { &self.ema } else { &self.params };
        Denoiser::from_params(self.config.clone(), p.clone())
    }

    pub fn router(&self, use_ema: bool) -> Result<Router> {
        if self.kind != ModelKind::Router {
            return Err(Error::contract("checkpoint", "denoiser checkpoint used as a router"));
        }
        let p = if use_ema { &self.ema } else { &self.params };
        Router::from_params(self.config.clone(), self.clusters, p.clone())
    }
}

pub fn store_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    container::write_file(path, &c.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    Checkpoint::from_bytes(&container::read_file(path)?, path)
}

/// Header only; the payload is not read.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    container::read_header(&mut BufReader::new(f), CHECKPOINT_MAGIC, path)
}
