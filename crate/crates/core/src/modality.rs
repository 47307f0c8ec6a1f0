//! Latent modality discovery over precomputed embedding vectors and the
//! amplified sampling weights that rebalance minor modalities.
//!
//! Clustering is plain Lloyd k-means with seeded k-means++ initialization and
//! squared Euclidean distance. Weights are inverse cluster frequency, so the
//! expected sampling mass per nonempty cluster is uniform.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error, PartialEq)]
pub enum ModalityError {
    #[error("need at least k={k} samples, got n={n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("non-finite value in sample {row}")]
    NonFinite { row: usize },
    #[error("sample {row} has {actual} values, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("embedding parse error: {0}")]
    Parse(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// `n` named vectors of dimension `d`, stored row-major.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    vectors: Vec<f64>,
    names: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(d: usize, vectors: Vec<f64>, names: Vec<String>) -> Result<Self, ModalityError> {
        if d == 0 {
            return Err(ModalityError::InvalidParam("dimension must be >= 1".into()));
        }
        if vectors.len() != names.len() * d {
            return Err(ModalityError::RaggedRow {
                row: names.len(),
                expected: names.len() * d,
                actual: vectors.len(),
            });
        }
        for (row, chunk) in vectors.chunks_exact(d).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(ModalityError::NonFinite { row });
            }
        }
        Ok(Self {
            n: names.len(),
            d,
            vectors,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Parse CSV rows of `name,v1,v2,...`. A non-numeric first data row is
    /// treated as a header and skipped.
    pub fn from_csv_str(text: &str) -> Result<Self, ModalityError> {
        let mut names = Vec::new();
        let mut vectors = Vec::new();
        let mut d: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let name = fields
                .next()
                .ok_or_else(|| ModalityError::Parse(format!("line {}: empty row", lineno + 1)))?
                .trim()
                .to_string();
            let values: Result<Vec<f64>, _> =
                fields.map(|f| f.trim().parse::<f64>()).collect();
            let values = match values {
                Ok(v) => v,
                Err(e) => {
                    if names.is_empty() && d.is_none() {
                        continue; // header row
                    }
                    return Err(ModalityError::Parse(format!("line {}: {e}", lineno + 1)));
                }
            };
            if values.is_empty() {
                return Err(ModalityError::Parse(format!(
                    "line {}: no embedding values",
                    lineno + 1
                )));
            }
            match d {
                None => d = Some(values.len()),
                Some(d0) if d0 != values.len() => {
                    return Err(ModalityError::RaggedRow {
                        row: names.len(),
                        expected: d0,
                        actual: values.len(),
                    })
                }
                _ => {}
            }
            names.push(name);
            vectors.extend(values);
        }
        let d = d.ok_or_else(|| ModalityError::Parse("no data rows".into()))?;
        Self::new(d, vectors, names)
    }

    /// Interpret a 1-channel raster as `n = height` rows of dimension
    /// `d = width`; rows are named by their index.
    pub fn from_raster(raster: &Raster) -> Result<Self, ModalityError> {
        if raster.channels() != 1 {
            return Err(ModalityError::Parse(format!(
                "embedding tensor must have 1 channel, got {}",
                raster.channels()
            )));
        }
        let names = (0..raster.height()).map(|i| i.to_string()).collect();
        let vectors = raster.data().iter().map(|&v| v as f64).collect();
        Self::new(raster.width(), vectors, names)
    }
}

#[derive(Debug, Clone)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 40,
            seed: 0,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

/// Fitted clustering: centroids, per-sample assignments and the final inertia
/// (sum of squared distances of every sample to its own centroid).
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = x - y;
            diff * diff
        })
        .sum()
}

fn assign(
    emb: &EmbeddingSet,
    centroids: &[f64],
    k: usize,
) -> (Vec<usize>, f64) {
    let d = emb.d;
    let per_point: Vec<(usize, f64)> = (0..emb.n)
        .into_par_iter()
        .map(|i| {
            let x = emb.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dist = dist2(x, &centroids[j * d..(j + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            (best, best_d)
        })
        .collect();
    let mut assignments = Vec::with_capacity(emb.n);
    let mut inertia = 0.0f64;
    for (a, dist) in per_point {
        assignments.push(a);
        inertia += dist;
    }
    (assignments, inertia)
}

fn plus_plus_init(emb: &EmbeddingSet, k: usize, rng: &mut StdRng) -> Vec<f64> {
    let d = emb.d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..emb.n);
    centroids.extend_from_slice(emb.row(first));

    let mut min_d2 = vec![0.0f64; emb.n];
    for chosen in 1..k {
        let mut total = 0.0f64;
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let dist = dist2(emb.row(i), &centroids[(chosen - 1) * d..chosen * d]);
            if chosen == 1 || dist < *slot {
                *slot = dist;
            }
            total += *slot;
        }
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = emb.n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // all remaining points coincide with chosen centroids
            rng.random_range(0..emb.n)
        };
        centroids.extend_from_slice(emb.row(idx));
    }
    centroids
}

/// Seeded k-means: k-means++ initialization, Lloyd iterations until the
/// largest centroid shift drops below `tol` or `max_iter` is reached. Empty
/// clusters are re-seeded from the point currently farthest from its own
/// centroid. Inertia is checked to be non-increasing across iterations.
pub fn kmeans(emb: &EmbeddingSet, cfg: &KmeansConfig) -> Result<ClusterModel, ModalityError> {
    let k = cfg.k;
    if k == 0 {
        return Err(ModalityError::InvalidParam("k must be >= 1".into()));
    }
    if emb.n < k {
        return Err(ModalityError::TooFewSamples { n: emb.n, k });
    }
    let d = emb.d;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(emb, k, &mut rng);

    let mut prev_inertia = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let (assignments, inertia) = assign(emb, &centroids, k);
        // Lloyd monotonicity, with headroom only for f64 summation noise
        assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let x = emb.row(i);
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    next[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }

        // re-seed empty clusters from the farthest point, one per cluster
        let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut dists: Vec<(f64, usize)> = (0..emb.n)
                .map(|i| {
                    let a = assignments[i];
                    (dist2(emb.row(i), &centroids[a * d..(a + 1) * d]), i)
                })
                .collect();
            dists.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (slot, &j) in empties.iter().enumerate() {
                let (_, i) = dists[slot.min(dists.len() - 1)];
                next[j * d..(j + 1) * d].copy_from_slice(emb.row(i));
            }
        }

        let mut shift: f64 = 0.0;
        for j in 0..k {
            shift = shift.max(dist2(&centroids[j * d..(j + 1) * d], &next[j * d..(j + 1) * d]).sqrt());
        }
        centroids = next;
        if shift < cfg.tol && empties.is_empty() {
            break;
        }
    }

    let (assignments, inertia) = assign(emb, &centroids, k);
    Ok(ClusterModel {
        k,
        d,
        centroids,
        assignments,
        inertia,
    })
}

/// Inverse-cluster-frequency weights: `w_i = n / (k_eff * |cluster(i)|)`
/// where `k_eff` counts nonempty clusters. Weights sum to `n` and put equal
/// expected mass on every nonempty cluster.
pub fn amplified_weights(model: &ClusterModel) -> Vec<f64> {
    amplified_weights_with_exponent(model, 1.0)
}

/// Interpolated variant: member weights proportional to `|cluster|^-alpha`,
/// normalized to sum to `n`. `alpha = 1` is exact balance, `alpha = 0` keeps
/// the natural frequency (all weights 1).
pub fn amplified_weights_with_exponent(model: &ClusterModel, alpha: f64) -> Vec<f64> {
    let n = model.assignments.len();
    let sizes = model.cluster_sizes();
    let raw: Vec<f64> = model
        .assignments
        .iter()
        .map(|&a| (sizes[a] as f64).powf(-alpha))
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| n as f64 * w / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(rng: &mut StdRng) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn blob_pair(n_per: usize, sep: f64, sigma: f64, seed: u64) -> (EmbeddingSet, Vec<usize>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut vectors = Vec::new();
        let mut names = Vec::new();
        let mut truth = Vec::new();
        for i in 0..2 * n_per {
            let blob = i % 2;
            let center = if blob == 0 { 0.0 } else { sep };
            vectors.push(center + sigma * gauss(&mut rng));
            vectors.push(center + sigma * gauss(&mut rng));
            names.push(format!("s{i}"));
            truth.push(blob);
        }
        (EmbeddingSet::new(2, vectors, names).unwrap(), truth)
    }

    #[test]
    fn n_equals_k_gives_zero_inertia() {
        let emb = EmbeddingSet::new(
            2,
            vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 7.0, 7.0],
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let model = kmeans(
            &emb,
            &KmeansConfig {
                k: 4,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut seen = model.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_blobs_are_recovered_exactly() {
        let sigma = 0.5;
        let (emb, truth) = blob_pair(50, 10.0 * sigma * 10.0, sigma, 7);
        let model = kmeans(
            &emb,
            &KmeansConfig {
                k: 2,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        // assignments must split exactly along blob membership
        let a0 = model.assignments[0];
        for (a, t) in model.assignments.iter().zip(&truth) {
            if *t == truth[0] {
                assert_eq!(*a, a0);
            } else {
                assert_ne!(*a, a0);
            }
        }
    }

    #[test]
    fn k_one_gives_the_mean() {
        let emb = EmbeddingSet::new(
            1,
            vec![1.0, 2.0, 3.0, 10.0],
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let model = kmeans(
            &emb,
            &KmeansConfig {
                k: 1,
                seed: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((model.centroids[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_is_deterministic_for_fixed_seed() {
        let (emb, _) = blob_pair(40, 3.0, 1.0, 21);
        let cfg = KmeansConfig {
            k: 5,
            seed: 9,
            ..Default::default()
        };
        let a = kmeans(&emb, &cfg).unwrap();
        let b = kmeans(&emb, &cfg).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
    }

    #[test]
    fn assignments_are_nearest_at_convergence() {
        let (emb, _) = blob_pair(30, 4.0, 1.0, 5);
        let model = kmeans(
            &emb,
            &KmeansConfig {
                k: 3,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..emb.len() {
            let x = emb.row(i);
            let own = dist2(x, model.centroid(model.assignments[i]));
            for j in 0..model.k {
                assert!(own <= dist2(x, model.centroid(j)) + 1e-12);
            }
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let emb = EmbeddingSet::new(1, vec![1.0], vec!["a".into()]).unwrap();
        assert_eq!(
            kmeans(
                &emb,
                &KmeansConfig {
                    k: 2,
                    ..Default::default()
                }
            )
            .unwrap_err(),
            ModalityError::TooFewSamples { n: 1, k: 2 }
        );
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        assert_eq!(
            EmbeddingSet::new(1, vec![f64::NAN], vec!["a".into()]).unwrap_err(),
            ModalityError::NonFinite { row: 0 }
        );
    }

    #[test]
    fn single_cluster_weights_are_one() {
        let model = ClusterModel {
            k: 1,
            d: 1,
            centroids: vec![0.0],
            assignments: vec![0; 10],
            inertia: 0.0,
        };
        let w = amplified_weights(&model);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn minority_cluster_is_amplified() {
        // sizes 9 and 1, n = 10, k_eff = 2
        let mut assignments = vec![0usize; 9];
        assignments.push(1);
        let model = ClusterModel {
            k: 2,
            d: 1,
            centroids: vec![0.0, 1.0],
            assignments,
            inertia: 0.0,
        };
        let w = amplified_weights(&model);
        for v in &w[..9] {
            assert!((v - 10.0 / 18.0).abs() < 1e-12);
        }
        assert!((w[9] - 5.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn equal_clusters_have_unit_weights() {
        let assignments: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let model = ClusterModel {
            k: 3,
            d: 1,
            centroids: vec![0.0; 3],
            assignments,
            inertia: 0.0,
        };
        assert!(amplified_weights(&model)
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn per_cluster_mass_is_uniform() {
        let mut assignments = Vec::new();
        for (cluster, count) in [(0usize, 17usize), (1, 3), (2, 30)] {
            assignments.extend(std::iter::repeat_n(cluster, count));
        }
        let n = assignments.len();
        let model = ClusterModel {
            k: 4, // cluster 3 stays empty
            d: 1,
            centroids: vec![0.0; 4],
            assignments,
            inertia: 0.0,
        };
        let w = amplified_weights(&model);
        let mut mass = [0.0f64; 4];
        for (i, &a) in model.assignments.iter().enumerate() {
            mass[a] += w[i];
        }
        let expected = n as f64 / 3.0;
        for &m in &mass[..3] {
            assert!((m - expected).abs() < 1e-9);
        }
        assert_eq!(mass[3], 0.0);
    }

    #[test]
    fn alpha_zero_keeps_natural_frequency() {
        let mut assignments = vec![0usize; 9];
        assignments.push(1);
        let model = ClusterModel {
            k: 2,
            d: 1,
            centroids: vec![0.0, 1.0],
            assignments,
            inertia: 0.0,
        };
        let w = amplified_weights_with_exponent(&model, 0.0);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn csv_parsing_with_header() {
        let text = "name,e0,e1\nimg1,0.5,1.5\nimg2,2.0,3.0\n";
        let emb = EmbeddingSet::from_csv_str(text).unwrap();
        assert_eq!(emb.len(), 2);
        assert_eq!(emb.dim(), 2);
        assert_eq!(emb.names()[0], "img1");
        assert_eq!(emb.row(1), &[2.0, 3.0]);
    }
}
