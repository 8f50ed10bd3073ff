//! Feature embedding and two-stage k-means partitioning into expert clusters.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    /// Flattened raw values.
    Identity,
    /// Centered, rotated onto principal axes and scaled to unit variance.
    PcaWhiten,
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "pca-whiten" => Ok(Self::PcaWhiten),
            other => Err(Error::Config(format!(
                "unknown embedder `{other}` (expected identity | pca-whiten)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub features: Tensor,
    pub embedder: EmbedderKind,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Fitted PCA whitening transform.
#[derive(Clone, Debug)]
pub struct PcaWhitener {
    mean: Vec<f64>,
    /// `[components, d]`, rows pre-divided by `sqrt(eigenvalue)`.
    projection: Vec<Vec<f64>>,
}

impl PcaWhitener {
    pub fn fit(samples: &Tensor) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(samples.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r = samples.row(i);
            for a in 0..d {
                let da = r[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / n as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        if !(top > 1e-12) {
            return Err(Error::Degenerate("samples have zero variance; cannot whiten".into()));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let projection = order
            .into_iter()
            .filter(|&j| eig.eigenvalues[j] > 1e-10 * top)
            .map(|j| {
                let s = eig.eigenvalues[j].sqrt();
                eig.eigenvectors.column(j).iter().map(|v| v / s).collect()
            })
            .collect();
        Ok(Self { mean, projection })
    }

    pub fn transform(&self, samples: &Tensor) -> Result<Tensor> {
        if samples.cols() != self.mean.len() {
            return Err(Error::contract(
                "pca_transform",
                format!("expected dimension {}, got {}", self.mean.len(), samples.cols()),
            ));
        }
        let n = samples.rows();
        let k = self.projection.len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let centered: Vec<f64> = samples.row(i).iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for p in &self.projection {
                out.push(p.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(&[n, k], out)
    }
}

/// Embed `[N, ...]` samples as `[N, d]` features.
pub fn embed(samples: &Tensor, kind: EmbedderKind) -> Result<FeatureMatrix> {
    let n = samples.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::contract("embed", "empty sample set"));
    }
    let flat = samples.clone().reshape(&[n, samples.len() / n])?;
    let features = match kind {
        EmbedderKind::Identity => flat,
        EmbedderKind::PcaWhiten => PcaWhitener::fit(&flat)?.transform(&flat)?,
    };
    if !features.is_finite() {
        return Err(Error::contract("embed", "non-finite feature"));
    }
    Ok(FeatureMatrix {
        features,
        embedder: kind,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub k: usize,
    /// 0-based cluster id per sample.
    pub assignments: Vec<usize>,
    /// `[k, d]`.
    pub centroids: Tensor,
    pub sizes: Vec<usize>,
    /// Weighted inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl Partition {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    /// `K=<K>` followed by one `index<TAB>cluster` line per sample.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("K={}\n", self.k);
        for (i, c) in self.assignments.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{c}");
        }
        s
    }

    /// Parses the assignment file; returns `(k, assignments)`.
    pub fn parse_tsv(text: &str) -> Result<(usize, Vec<usize>)> {
        let bad = |detail: String| Error::Parse {
            what: "partition file",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let k: usize = header
            .strip_prefix("K=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        let mut out = Vec::new();
        for (line_no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (i, c) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected index<TAB>cluster", line_no + 2)))?;
            let i: usize = i.parse().map_err(|_| bad(format!("line {}: bad index", line_no + 2)))?;
            let c: usize = c
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {}: bad cluster", line_no + 2)))?;
            if i != out.len() {
                return Err(bad(format!("line {}: index {i} out of order", line_no + 2)));
            }
            if c >= k {
                return Err(bad(format!("line {}: cluster {c} outside 0..{k}", line_no + 2)));
            }
            out.push(c);
        }
        Ok((k, out))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest centroid, ties to the lowest id.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[&[f64]], weights: &[f64], m: usize, stream: &mut RngStream) -> Vec<Vec<f64>> {
    let n = points.len();
    let pick = |mass: &[f64], stream: &mut RngStream| -> Option<usize> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut r = stream.next_f64() * total;
        for (i, w) in mass.iter().enumerate() {
            if *w > 0.0 {
                if r < *w {
                    return Some(i);
                }
                r -= w;
            }
        }
        mass.iter().rposition(|w| *w > 0.0)
    };
    let first = pick(weights, stream).unwrap_or(0);
    let mut chosen = vec![first];
    let mut centers = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centers.len() < m {
        let mass: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        // all remaining mass sits on existing centers: take the next unused index
        let next = pick(&mass, stream).unwrap_or_else(|| (0..n).find(|i| !chosen.contains(i)).unwrap_or(0));
        chosen.push(next);
        centers.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    centers
}

/// Relabel clusters in order of first appearance so equal partitions compare equal.
fn canonicalize(assign: &mut [usize], centroids: &mut Vec<Vec<f64>>) {
    let k = centroids.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for a in assign.iter() {
        if map[*a] == usize::MAX {
            map[*a] = next;
            next += 1;
        }
    }
    for m in map.iter_mut() {
        if *m == usize::MAX {
            *m = next;
            next += 1;
        }
    }
    for a in assign.iter_mut() {
        *a = map[*a];
    }
    let mut reordered = vec![Vec::new(); k];
    for (old, c) in centroids.drain(..).enumerate() {
        reordered[map[old]] = c;
    }
    *centroids = reordered;
}

fn weighted_kmeans(
    points: &[&[f64]],
    weights: &[f64],
    m: usize,
    iters: usize,
    stream: &mut RngStream,
) -> Result<Partition> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::contract(
            "kmeans",
            format!("cluster count {m} must be in 1..={n}"),
        ));
    }
    let d = points[0].len();
    let mut centroids = seed_plus_plus(points, weights, m, stream);
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (j, dd) = nearest(p, &centroids);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dist[i] = dd;
        }
        // repair: an empty cluster takes the farthest member of the largest one
        loop {
            let mut sizes = vec![0usize; m];
            assign.iter().for_each(|&a| sizes[a] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let largest = (0..m).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap_or(0);
            let far = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("largest cluster is nonempty");
            assign[far] = empty;
            centroids[empty] = points[far].to_vec();
            dist[far] = 0.0;
            changed = true;
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut mass = vec![0.0; m];
        for (i, p) in points.iter().enumerate() {
            let a = assign[i];
            mass[a] += weights[i];
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += weights[i] * x);
        }
        for j in 0..m {
            if mass[j] > 0.0 {
                centroids[j] = sums[j].iter().map(|s| s / mass[j]).collect();
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .zip(weights)
            .map(|((p, &a), w)| w * sq_dist(p, &centroids[a]))
            .sum();
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
    }
    canonicalize(&mut assign, &mut centroids);
    let mut sizes = vec![0usize; m];
    assign.iter().for_each(|&a| sizes[a] += 1);
    Ok(Partition {
        k: m,
        assignments: assign,
        centroids: Tensor::new(&[m, d], centroids.concat())?,
        sizes,
        inertia_history: history,
    })
}

fn rows(features: &FeatureMatrix) -> Vec<&[f64]> {
    (0..features.len()).map(|i| features.row(i)).collect()
}

/// Lloyd's algorithm with k-means++ seeding drawn from `stream`.
pub fn kmeans(features: &FeatureMatrix, m: usize, iters: usize, stream: &mut RngStream) -> Result<Partition> {
    let pts = rows(features);
    weighted_kmeans(&pts, &vec![1.0; pts.len()], m, iters, stream)
}

/// Fine k-means to `m_fine` centroids, then count-weighted k-means of those
/// centroids down to `k`; each sample inherits its fine centroid's coarse id.
pub fn hierarchical_partition(
    features: &FeatureMatrix,
    m_fine: usize,
    k: usize,
    iters: usize,
    stream: &mut RngStream,
) -> Result<Partition> {
    let n = features.len();
    if !(1 <= k && k <= m_fine && m_fine <= n) {
        return Err(Error::contract(
            "hierarchical_partition",
            format!("need 1 <= K ({k}) <= M_fine ({m_fine}) <= N ({n})"),
        ));
    }
    let fine = kmeans(features, m_fine, iters, stream)?;
    if m_fine == k {
        return Ok(fine);
    }
    let fine_rows: Vec<&[f64]> = (0..m_fine).map(|j| fine.centroids.row(j)).collect();
    let fine_mass: Vec<f64> = fine.sizes.iter().map(|&s| s as f64).collect();
    let coarse = weighted_kmeans(&fine_rows, &fine_mass, k, iters, stream)?;
    let mut assign: Vec<usize> = fine.assignments.iter().map(|&f| coarse.assignments[f]).collect();
    let mut centroids: Vec<Vec<f64>> = (0..k).map(|j| coarse.centroids.row(j).to_vec()).collect();
    canonicalize(&mut assign, &mut centroids);
    let pts = rows(features);
    let mut sizes = vec![0usize; k];
    assign.iter().for_each(|&a| sizes[a] += 1);
    let inertia = pts.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
    Ok(Partition {
        k,
        assignments: assign,
        centroids: Tensor::new(&[k, features.dim()], centroids.concat())?,
        sizes,
        inertia_history: vec![inertia],
    })
}

/// Nearest coarse centroid per row, ties to the lowest id.
pub fn assign(features: &FeatureMatrix, partition: &Partition) -> Result<Vec<usize>> {
    if features.dim() != partition.centroids.cols() {
        return Err(Error::contract(
            "assign",
            format!(
                "features have dimension {}, centroids {}",
                features.dim(),
                partition.centroids.cols()
            ),
        ));
    }
    let cents: Vec<Vec<f64>> = (0..partition.k).map(|j| partition.centroids.row(j).to_vec()).collect();
    Ok((0..features.len())
        .map(|i| nearest(features.row(i), &cents).0)
        .collect())
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let sum_ij: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian;

    fn features(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix {
            features: Tensor::from_rows(&rows).unwrap(),
            embedder: EmbedderKind::Identity,
        }
    }

    fn blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (FeatureMatrix, Vec<usize>) {
        let mut s = RngStream::from_label(seed, "blobs");
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..per {
            for (c, ctr) in centers.iter().enumerate() {
                let _ = i;
                rows.push(ctr.iter().map(|m| m + sigma * s.normal()).collect());
                truth.push(c);
            }
        }
        (features(rows), truth)
    }

    #[test]
    fn identity_embedder_passes_points_through() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(embed(&t, EmbedderKind::Identity).unwrap().features, t);
        assert!("dinov2".parse::<EmbedderKind>().is_err());
    }

    #[test]
    fn whitened_features_have_unit_variance() {
        let mut s = RngStream::from_label(1, "pca");
        let mut raw = gaussian(&mut s, &[500, 5]);
        // correlate and stretch the columns
        for i in 0..500 {
            let r = &mut raw.data_mut()[i * 5..i * 5 + 5];
            r[1] = 3.0 * r[0] + 0.5 * r[1];
            r[4] *= 10.0;
            r[2] += 7.0;
        }
        let f = embed(&raw, EmbedderKind::PcaWhiten).unwrap();
        for j in 0..f.dim() {
            let col: Vec<f64> = (0..500).map(|i| f.features.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!((var - 1.0).abs() <= 1e-6, "dim {j} var {var}");
        }
    }

    #[test]
    fn constant_data_cannot_be_whitened() {
        let t = Tensor::full(&[10, 3], 2.5);
        assert!(matches!(embed(&t, EmbedderKind::PcaWhiten), Err(Error::Degenerate(_))));
    }

    #[test]
    fn singleton_blobs_get_own_centroids() {
        let f = features(vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0], vec![10.0, 10.0]]);
        let p = kmeans(&f, 4, 20, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(p.inertia(), 0.0);
        assert_eq!(p.sizes, vec![1, 1, 1, 1]);
    }

    #[test]
    fn too_many_clusters_is_contract_error() {
        let f = features(vec![vec![0.0], vec![1.0]]);
        assert!(kmeans(&f, 3, 10, &mut RngStream::new(1, 1)).is_err());
        assert!(hierarchical_partition(&f, 1, 2, 10, &mut RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn separated_blobs_recovered_exactly() {
        let (f, truth) = blobs(&[vec![-5.0, -5.0], vec![5.0, 5.0]], 100, 0.1, 3);
        let p = kmeans(&f, 2, 50, &mut RngStream::new(2, 2)).unwrap();
        assert_eq!(adjusted_rand_index(&p.assignments, &truth), 1.0);
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let mut s = RngStream::from_label(4, "lloyd");
        let f = FeatureMatrix {
            features: gaussian(&mut s, &[300, 3]),
            embedder: EmbedderKind::Identity,
        };
        let p = kmeans(&f, 7, 100, &mut RngStream::new(5, 5)).unwrap();
        assert!(p.inertia_history.len() > 1);
        for w in p.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", p.inertia_history);
        }
    }

    #[test]
    fn partition_is_deterministic_and_covering() {
        let mut s = RngStream::from_label(6, "det");
        let f = FeatureMatrix {
            features: gaussian(&mut s, &[200, 4]),
            embedder: EmbedderKind::Identity,
        };
        let a = hierarchical_partition(&f, 16, 4, 50, &mut RngStream::new(9, 9)).unwrap();
        let b = hierarchical_partition(&f, 16, 4, 50, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes.iter().sum::<usize>(), 200);
        assert!(a.sizes.iter().all(|&s| s > 0));
        assert!(a.assignments.iter().all(|&c| c < 4));
    }

    #[test]
    fn two_stage_with_equal_counts_matches_single_stage() {
        let mut s = RngStream::from_label(7, "eq");
        let f = FeatureMatrix {
            features: gaussian(&mut s, &[120, 2]),
            embedder: EmbedderKind::Identity,
        };
        let single = kmeans(&f, 5, 50, &mut RngStream::new(3, 3)).unwrap();
        let two = hierarchical_partition(&f, 5, 5, 50, &mut RngStream::new(3, 3)).unwrap();
        assert_eq!(single, two);
    }

    #[test]
    fn eight_blobs_two_stage_is_pure() {
        let centers: Vec<Vec<f64>> = (0..8)
            .map(|c| {
                let a = c as f64 * std::f64::consts::TAU / 8.0;
                vec![20.0 * a.cos(), 20.0 * a.sin(), if c % 2 == 0 { 5.0 } else { -5.0 }]
            })
            .collect();
        let (f, truth) = blobs(&centers, 64, 0.5, 8);
        let p = hierarchical_partition(&f, 64, 8, 100, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(adjusted_rand_index(&p.assignments, &truth), 1.0);
    }

    #[test]
    fn single_coarse_cluster() {
        let (f, _) = blobs(&[vec![0.0], vec![3.0]], 10, 0.2, 1);
        let p = hierarchical_partition(&f, 4, 1, 20, &mut RngStream::new(1, 2)).unwrap();
        assert!(p.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn assign_tie_breaks_low_and_matches_training() {
        let p = Partition {
            k: 6,
            assignments: vec![],
            centroids: Tensor::from_rows(&[
                vec![100.0],
                vec![100.0],
                vec![-1.0],
                vec![100.0],
                vec![100.0],
                vec![1.0],
            ])
            .unwrap(),
            sizes: vec![],
            inertia_history: vec![],
        };
        let f = features(vec![vec![0.0], vec![-1.0], vec![1.0]]);
        assert_eq!(assign(&f, &p).unwrap(), vec![2, 2, 5]);
        let wrong = features(vec![vec![0.0, 1.0]]);
        assert!(assign(&wrong, &p).is_err());

        let (f, _) = blobs(&[vec![-3.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]], 40, 0.3, 2);
        let p = hierarchical_partition(&f, 12, 3, 100, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(assign(&f, &p).unwrap(), p.assignments);
    }

    #[test]
    fn tsv_round_trip() {
        let (f, _) = blobs(&[vec![0.0], vec![9.0]], 5, 0.1, 3);
        let p = kmeans(&f, 2, 10, &mut RngStream::new(1, 1)).unwrap();
        let text = p.to_tsv();
        assert!(text.starts_with("K=2\n0\t"));
        assert_eq!(Partition::parse_tsv(&text).unwrap(), (2, p.assignments));
        assert!(Partition::parse_tsv("K=2\n0\t5\n").is_err());
    }

    #[test]
    fn ari_bounds() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0);
    }
}
