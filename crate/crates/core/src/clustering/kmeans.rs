//! Seeded K-means (k-means++ init, Lloyd iterations).
//!
//! Results depend only on the input order and the seed. Point-wise work
//! (distances, assignments) runs in parallel; every reduction is done in a
//! fixed order so the thread count never changes a bit of the output.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor_store::{read_tensor, write_tensor, Tensor};

/// Row-major set of equal-length f32 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of dim {dim}",
                data.len()
            )));
        }
        Ok(VectorSet { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "vector {bad} has dim {}, expected {dim}",
                rows[bad].len()
            )));
        }
        VectorSet::new(dim.max(1), rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative centroid shift falls below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    pub seed: u64,
    pub inertia: f64,
    pub n_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub inertia: f64,
    pub n_iter: usize,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar {
            k: self.k,
            dim: self.dim,
            seed: self.seed,
            inertia: self.inertia,
            n_iter: self.n_iter,
        }
    }

    /// Writes the centroids as a `[k, dim]` tensor plus a JSON sidecar.
    pub fn save(
        &self,
        tensor_path: impl AsRef<Path>,
        sidecar_path: impl AsRef<Path>,
    ) -> Result<()> {
        let t = Tensor::new(vec![self.k, self.dim], self.centroids.clone())?;
        write_tensor(&t, tensor_path)?;
        let sidecar_path = sidecar_path.as_ref();
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        fs::write(sidecar_path, json + "\n").map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(tensor_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(tensor_path)?;
        let sidecar_path = sidecar_path.as_ref();
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let meta: ModelSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: sidecar_path.to_path_buf(),
            line: 1,
            source,
        })?;
        if t.shape() != [meta.k, meta.dim] {
            return Err(Error::Shape(format!(
                "centroid tensor {:?} disagrees with sidecar k={} dim={}",
                t.shape(),
                meta.k,
                meta.dim
            )));
        }
        Ok(ClusterModel {
            k: meta.k,
            dim: meta.dim,
            centroids: t.into_data(),
            seed: meta.seed,
            inertia: meta.inertia,
            n_iter: meta.n_iter,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Final assignment of each training vector.
    pub labels: Vec<usize>,
    /// Inertia after every assignment step, in order.
    pub inertia_trace: Vec<f64>,
}

fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(data: &VectorSet, centroids: &[f32]) -> Vec<(usize, f64)> {
    par::map_range(data.len(), |i| nearest(data.row(i), centroids, data.dim))
}

/// Labels each vector with its nearest centroid; ties go to the lower index.
pub fn kmeans_assign(model: &ClusterModel, data: &VectorSet) -> Result<Vec<usize>> {
    if data.dim() != model.dim {
        return Err(Error::Shape(format!(
            "vectors have dim {}, model has dim {}",
            data.dim(),
            model.dim
        )));
    }
    Ok(assign_all(data, &model.centroids)
        .into_iter()
        .map(|(c, _)| c)
        .collect())
}

fn plus_plus_init(data: &VectorSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len();
    let dim = data.dim();
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(data.row(first));
    let mut min_d = par::map_range(n, |i| squared_distance(data.row(i), data.row(first)));

    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for (i, &d) in min_d.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                last_positive = Some(i);
                acc += d;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.or(last_positive)
                .expect("positive total implies a positive weight")
        } else {
            // Every point coincides with a chosen centroid: take unchosen points in order.
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = data.row(next).to_vec();
        par::for_each_mut(&mut min_d, |i, d| {
            let nd = squared_distance(data.row(i), &c);
            if nd < *d {
                *d = nd;
            }
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn update_centroids(data: &VectorSet, labels: &[usize], k: usize) -> (Vec<f32>, Vec<usize>) {
    let dim = data.dim();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let means: Vec<Option<Vec<f32>>> = par::map(&members, |idx| {
        if idx.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f64; dim];
        for &i in idx {
            for (a, &x) in acc.iter_mut().zip(data.row(i)) {
                *a += x as f64;
            }
        }
        let n = idx.len() as f64;
        Some(acc.into_iter().map(|a| (a / n) as f32).collect())
    });
    let mut centroids = Vec::with_capacity(k * dim);
    let mut empty = Vec::new();
    for (c, mean) in means.into_iter().enumerate() {
        match mean {
            Some(m) => centroids.extend(m),
            None => {
                empty.push(c);
                centroids.extend(std::iter::repeat_n(0.0, dim));
            }
        }
    }
    (centroids, empty)
}

/// Fits `cfg.k` centroids to `data`.
pub fn kmeans_fit(data: &VectorSet, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = data.len();
    let dim = data.dim();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {n} vectors"
        )));
    }
    if let Some(i) = (0..n).find(|&i| data.row(i).iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { index: i });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut trace = Vec::new();
    let mut n_iter = 0;
    let mut prev_labels: Option<Vec<usize>> = None;

    let (labels, inertia) = loop {
        let assigned = assign_all(data, &centroids);
        let labels: Vec<usize> = assigned.iter().map(|&(c, _)| c).collect();
        let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
        trace.push(inertia);

        let stable = prev_labels.as_ref() == Some(&labels);
        if stable || n_iter >= cfg.max_iter {
            break (labels, inertia);
        }

        let (mut next, empty) = update_centroids(data, &labels, k);
        if !empty.is_empty() {
            // Refill each empty cluster with the point currently farthest
            // from its centroid, never reusing a point.
            let mut dists: Vec<f64> = assigned.iter().map(|&(_, d)| d).collect();
            for c in empty {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                next[c * dim..(c + 1) * dim].copy_from_slice(data.row(far));
                dists[far] = f64::NEG_INFINITY;
            }
        }

        let mut shift = 0.0;
        let mut norm = 0.0;
        for (old, new) in centroids.iter().zip(&next) {
            shift += (*new as f64 - *old as f64).powi(2);
            norm += (*old as f64).powi(2);
        }
        let rel_shift = shift.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE);
        centroids = next;
        n_iter += 1;
        prev_labels = Some(labels);

        if rel_shift < cfg.tol {
            let assigned = assign_all(data, &centroids);
            let labels: Vec<usize> = assigned.iter().map(|&(c, _)| c).collect();
            let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
            trace.push(inertia);
            break (labels, inertia);
        }
    };

    Ok(KMeansFit {
        model: ClusterModel {
            k,
            dim,
            centroids,
            seed: cfg.seed,
            inertia,
            n_iter,
        },
        labels,
        inertia_trace: trace,
    })
}
