//! Sample sets and their on-disk container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, payload_bytes, payload_values, round_f32, sha256_hex};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"PARISDAT";

/// Rows of clean samples with their global ids and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    /// `[N, d]`, `d = product(sample_shape)`.
    pub data: Tensor,
    pub sample_shape: Vec<usize>,
    /// Position of each row in the full dataset.
    pub ids: Vec<usize>,
    /// Component or cluster label per row (0-based).
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub sample_shape: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    /// Set on shard files.
    pub cluster: Option<usize>,
    pub ids: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub digest: String,
}

impl Samples {
    /// Values are rounded to `f32` so in-memory and stored sets agree.
    pub fn new(data: Tensor, sample_shape: Vec<usize>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = data.rows();
        let ids = (0..n).collect();
        Self::with_ids(data, sample_shape, ids, labels)
    }

    pub fn with_ids(
        data: Tensor,
        sample_shape: Vec<usize>,
        ids: Vec<usize>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::contract(
                "samples",
                format!("data {:?} is not a set of {:?} samples", data.shape(), sample_shape),
            ));
        }
        let n = data.len() / d;
        if ids.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::contract(
                "samples",
                "ids/labels length differs from sample count",
            ));
        }
        let data = data.reshape(&[n, d])?.map(round_f32);
        Ok(Self {
            data,
            sample_shape,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Rows at the given local positions.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Tensor::new(&[rows.len(), d], out).expect("gathered rows")
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            data: self.gather(rows),
            sample_shape: self.sample_shape.clone(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Rows whose label equals `k`.
    pub fn with_label(&self, k: usize) -> Self {
        let rows: Vec<usize> = match &self.labels {
            Some(l) => (0..self.len()).filter(|&i| l[i] == k).collect(),
            None => vec![],
        };
        self.subset(&rows)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&payload_bytes(self.data.data()))
    }

    /// Digest of one sample's values, used for set comparisons across shards.
    pub fn row_digest(&self, i: usize) -> String {
        sha256_hex(&payload_bytes(self.row(i)))
    }

    pub fn to_bytes(&self, seed: u64, cluster: Option<usize>) -> Result<Vec<u8>> {
        let payload = payload_bytes(self.data.data());
        let header = DatasetHeader {
            format_version: container::FORMAT_VERSION,
            sample_shape: self.sample_shape.clone(),
            count: self.len(),
            seed,
            cluster,
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            digest: sha256_hex(&payload),
        };
        container::encode(DATASET_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(DatasetHeader, Self)> {
        let (header, payload): (DatasetHeader, _) = container::decode(bytes, DATASET_MAGIC, path)?;
        let d: usize = header.sample_shape.iter().product();
        container::verify_payload(payload, &header.digest, header.count * d, path)?;
        let data = Tensor::new(&[header.count, d], payload_values(payload))?;
        let s = Self::with_ids(
            data,
            header.sample_shape.clone(),
            header.ids.clone(),
            header.labels.clone(),
        )
        .map_err(|e| Error::Corruption {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok((header, s))
    }

    pub fn store(&self, path: &Path, seed: u64, cluster: Option<usize>) -> Result<()> {
        container::write_file(path, &self.to_bytes(seed, cluster)?)
    }

    pub fn load(path: &Path) -> Result<(DatasetHeader, Self)> {
        Self::from_bytes(&container::read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_load_round_trip() {
        let data = Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let s = Samples::new(data, vec![2], Some(vec![0, 1, 0])).unwrap();
        let bytes = s.to_bytes(9, Some(1)).unwrap();
        let (h, back) = Samples::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!((h.seed, h.cluster, h.count), (9, Some(1), 3));
        assert_eq!(s.with_label(0).ids, vec![0, 2]);
    }

    #[test]
    fn bad_shapes_rejected() {
        let data = Tensor::zeros(&[3, 2]);
        assert!(Samples::new(data.clone(), vec![4], None).is_err());
        assert!(Samples::new(data, vec![2], Some(vec![0])).is_err());
    }
}
