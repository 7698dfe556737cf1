//! UMAP dimensionality reduction.
//!
//! Stages: exact cosine kNN, per-point bandwidth calibration, fuzzy union of
//! the directed membership graph, a least-squares fit of the low-dimensional
//! similarity curve `1 / (1 + a d^(2b))`, and seeded SGD with negative
//! sampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, EmbeddingMatrix};
use crate::text::fmt6;

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("k = {k} requires more than {k} points, got {rows}")]
    KTooLarge { k: usize, rows: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("curve fit diverged (rms residual {0})")]
    FitDiverged(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub n_components: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            n_neighbors: 15,
            n_components: 5,
            min_dist: 0.0,
            spread: 1.0,
            n_epochs: 200,
            negative_sample_rate: 5,
            seed: 42,
        }
    }
}

impl UmapParams {
    fn validate(&self, n_points: usize) -> Result<(), ReduceError> {
        if self.n_neighbors >= n_points {
            return Err(ReduceError::KTooLarge {
                k: self.n_neighbors,
                rows: n_points,
            });
        }
        if self.n_neighbors < 2 {
            return Err(ReduceError::InvalidParams("n_neighbors must be >= 2".into()));
        }
        if self.n_components < 1 {
            return Err(ReduceError::InvalidParams("n_components must be >= 1".into()));
        }
        if !(self.min_dist >= 0.0) || !(self.spread > 0.0) {
            return Err(ReduceError::InvalidParams("need min_dist >= 0 and spread > 0".into()));
        }
        Ok(())
    }
}

/// Neighbor lists sorted by ascending distance (ties by lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

/// Symmetric weighted graph; every undirected edge is stored in both
/// directions, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FuzzyGraph {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&(i, j)))
            .map(|pos| self.edges[pos].2)
            .unwrap_or(0.0)
    }
}

/// Low-dimensional coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates {
    pub rows: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl Coordinates {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dims = rows.first().map_or(0, Vec::len);
        Coordinates {
            rows: rows.len(),
            dims,
            data: rows.concat(),
        }
    }

    /// Writes `row_key,c1..cn` CSV with six significant digits.
    pub fn write_csv(&self, keys: &[String], path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (1..=self.dims).map(|d| format!("c{d}")).collect();
        writeln!(w, "row_key,{}", header.join(","))?;
        for i in 0..self.rows {
            let vals: Vec<String> = self.row(i).iter().map(|&x| fmt6(x)).collect();
            writeln!(w, "{},{}", keys[i], vals.join(","))?;
        }
        w.flush()
    }
}

fn cosine_distance(u: &[f32], v: &[f32], nu: f64, nv: f64) -> f64 {
    if u == v {
        return 0.0;
    }
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    (1.0 - dot(u, v) / (nu * nv)).max(0.0)
}

fn neighbors_of(x: &EmbeddingMatrix, norms: &[f64], i: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let xi = x.row(i);
    let mut cand: Vec<(f64, usize)> = (0..x.rows)
        .filter(|&j| j != i)
        .map(|j| (cosine_distance(xi, x.row(j), norms[i], norms[j]), j))
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_dist);
        cand.truncate(k);
    }
    cand.sort_by(by_dist);
    cand.into_iter().map(|(d, j)| (j, d)).unzip()
}

/// Exact brute-force k nearest neighbors under cosine distance, self excluded.
pub fn knn_graph(x: &EmbeddingMatrix, k: usize) -> Result<KnnGraph, ReduceError> {
    if k >= x.rows || x.rows < 2 {
        return Err(ReduceError::KTooLarge { k, rows: x.rows });
    }
    if k == 0 {
        return Err(ReduceError::InvalidParams("k must be positive".into()));
    }
    let norms: Vec<f64> = x.iter_rows().map(crate::embed::norm).collect();
    #[cfg(feature = "parallel")]
    let lists: Vec<(Vec<usize>, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..x.rows).into_par_iter().map(|i| neighbors_of(x, &norms, i, k)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let lists: Vec<(Vec<usize>, Vec<f64>)> = (0..x.rows).map(|i| neighbors_of(x, &norms, i, k)).collect();
    let (indices, distances) = lists.into_iter().unzip();
    Ok(KnnGraph {
        k,
        indices,
        distances,
    })
}

const SIGMA_MIN: f64 = 1e-8;
const SIGMA_MAX: f64 = 1e8;

fn membership_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum()
}

/// Calibrates `(rho, sigma)` so the memberships over the neighbor list sum
/// to `log2(k)`. Sigma is found by 64 bisection steps inside `[1e-8, 1e8]`.
pub fn smooth_knn(distances: &[f64], k: usize) -> (f64, f64) {
    let rho = distances.first().copied().unwrap_or(0.0);
    let target = (k as f64).log2();
    if membership_sum(distances, rho, SIGMA_MIN) >= target {
        return (rho, SIGMA_MIN);
    }
    if membership_sum(distances, rho, SIGMA_MAX) <= target {
        return (rho, SIGMA_MAX);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if membership_sum(distances, rho, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (rho, 0.5 * (lo + hi))
}

/// Directed membership weights `(i, j, p)` from a kNN graph.
pub fn directed_memberships(knn: &KnnGraph) -> (Vec<(usize, usize, f64)>, Vec<f64>, Vec<f64>) {
    let mut edges = Vec::new();
    let mut rhos = Vec::with_capacity(knn.indices.len());
    let mut sigmas = Vec::with_capacity(knn.indices.len());
    for (i, (idx, dist)) in knn.indices.iter().zip(&knn.distances).enumerate() {
        let (rho, sigma) = smooth_knn(dist, knn.k);
        for (&j, &d) in idx.iter().zip(dist) {
            edges.push((i, j, (-(d - rho).max(0.0) / sigma).exp()));
        }
        rhos.push(rho);
        sigmas.push(sigma);
    }
    (edges, rhos, sigmas)
}

/// Probabilistic t-conorm symmetrization `P + Pᵀ − P∘Pᵀ`; zero weights and
/// self loops are dropped.
pub fn fuzzy_union(n: usize, directed: &[(usize, usize, f64)]) -> FuzzyGraph {
    let mut p: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, w) in directed {
        if i != j {
            *p.entry((i, j)).or_insert(0.0) = w;
        }
    }
    let mut keys: Vec<(usize, usize)> = p.keys().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
    keys.sort_unstable();
    keys.dedup();
    let edges = keys
        .into_iter()
        .filter_map(|(i, j)| {
            let a = p.get(&(i, j)).copied().unwrap_or(0.0);
            let b = p.get(&(j, i)).copied().unwrap_or(0.0);
            let w = a + b - a * b;
            (w > 0.0).then_some((i, j, w))
        })
        .collect();
    FuzzyGraph {
        n,
        edges,
        rho: Vec::new(),
        sigma: Vec::new(),
    }
}

/// Target similarity: 1 inside `min_dist`, exponential decay beyond.
pub fn target_curve(d: f64, min_dist: f64, spread: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist) / spread).exp()
    }
}

pub fn curve(d: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * d.powf(2.0 * b))
}

/// Result of fitting the low-dimensional similarity curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit {
    pub a: f64,
    pub b: f64,
    pub rms: f64,
    pub max_abs_error: f64,
}

pub const CURVE_SAMPLES: usize = 300;

pub fn curve_grid(spread: f64) -> Vec<f64> {
    let hi = 3.0 * spread;
    (0..CURVE_SAMPLES)
        .map(|i| hi * i as f64 / (CURVE_SAMPLES - 1) as f64)
        .collect()
}

fn sse(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (curve(x, a, b) - y).powi(2)).sum()
}

/// Levenberg–Marquardt fit of `(a, b)` on 300 evenly spaced samples over
/// `[0, 3·spread]`, starting from `(1, 1)`.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<CurveFit, ReduceError> {
    if !(spread > 0.0) || !(min_dist >= 0.0) {
        return Err(ReduceError::InvalidParams("need spread > 0 and min_dist >= 0".into()));
    }
    let xs = curve_grid(spread);
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cost = sse(&xs, &ys, a, b);
    for _ in 0..1000 {
        // normal equations J^T J and J^T r
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = (1.0 + a * p).powi(2);
            let da = -p / denom;
            let db = -a * p * 2.0 * x.ln() / denom;
            let r = curve(x, a, b) - y;
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..50 {
            let m00 = jaa * (1.0 + lambda);
            let m11 = jbb * (1.0 + lambda);
            let det = m00 * m11 - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(m11 * ga - jab * gb) / det;
            let step_b = -(m00 * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let new_cost = sse(&xs, &ys, na, nb);
                if new_cost < cost {
                    let gain = cost - new_cost;
                    a = na;
                    b = nb;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = gain > 1e-15 * cost.max(1e-300);
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let rms = (cost / xs.len() as f64).sqrt();
    let max_abs_error = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (curve(x, a, b) - y).abs())
        .fold(0.0, f64::max);
    if !(rms <= 0.1) {
        return Err(ReduceError::FitDiverged(rms));
    }
    Ok(CurveFit {
        a,
        b,
        rms,
        max_abs_error,
    })
}

fn clip(x: f64) -> f64 {
    x.clamp(-4.0, 4.0)
}

fn dist_sq(y: &[f64], i: usize, j: usize, dims: usize) -> f64 {
    (0..dims).map(|d| (y[i * dims + d] - y[j * dims + d]).powi(2)).sum()
}

/// Seeded uniform initialization in `[-10, 10]^dims`.
pub fn random_init(n: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * dims).map(|_| rng.gen_range(-10.0..10.0)).collect()
}

/// SGD layout of a fuzzy graph. Edges are visited on a schedule so each is
/// sampled in proportion to its weight; every positive sample is followed by
/// `negative_sample_rate` repulsive samples against uniformly drawn points.
/// The learning rate decays linearly from 1 to 0.
pub fn optimize_layout(graph: &FuzzyGraph, params: &UmapParams, a: f64, b: f64) -> Coordinates {
    let n = graph.n;
    let dims = params.n_components;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y = random_init(n, dims, &mut rng);
    let n_epochs = params.n_epochs;

    let w_max = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let active: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .copied()
        .filter(|&(_, _, w)| w >= w_max / n_epochs.max(1) as f64)
        .map(|(i, j, w)| (i, j, w_max / w))
        .collect();
    let neg_rate = params.negative_sample_rate.max(1) as f64;
    let mut next_sample: Vec<f64> = active.iter().map(|e| e.2).collect();
    let mut next_negative: Vec<f64> = active.iter().map(|e| e.2 / neg_rate).collect();

    for epoch in 0..n_epochs {
        let alpha = 1.0 - epoch as f64 / n_epochs as f64;
        let now = epoch as f64;
        for (e, &(i, j, every)) in active.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let d2 = dist_sq(&y, i, j, dims);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for d in 0..dims {
                let g = clip(coeff * (y[i * dims + d] - y[j * dims + d])) * alpha;
                y[i * dims + d] += g;
                y[j * dims + d] -= g;
            }
            next_sample[e] += every;

            let every_neg = every / neg_rate;
            let n_neg = ((now - next_negative[e]) / every_neg).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.gen_range(0..n);
                if k == i {
                    continue;
                }
                let d2 = dist_sq(&y, i, k, dims);
                let coeff = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for d in 0..dims {
                    let g = if coeff > 0.0 {
                        clip(coeff * (y[i * dims + d] - y[k * dims + d]))
                    } else {
                        4.0
                    };
                    y[i * dims + d] += g * alpha;
                }
            }
            next_negative[e] += n_neg as f64 * every_neg;
        }
    }
    Coordinates {
        rows: n,
        dims,
        data: y,
    }
}

/// Builds the fuzzy graph for `x`: kNN, calibration, union.
pub fn fuzzy_graph(x: &EmbeddingMatrix, n_neighbors: usize) -> Result<FuzzyGraph, ReduceError> {
    let knn = knn_graph(x, n_neighbors)?;
    let (directed, rho, sigma) = directed_memberships(&knn);
    let mut graph = fuzzy_union(x.rows, &directed);
    graph.rho = rho;
    graph.sigma = sigma;
    Ok(graph)
}

/// Full UMAP reduction of `x` to `params.n_components` dimensions.
pub fn umap_reduce(x: &EmbeddingMatrix, params: &UmapParams) -> Result<Coordinates, ReduceError> {
    params.validate(x.rows)?;
    let graph = fuzzy_graph(x, params.n_neighbors)?;
    let fit = fit_ab(params.min_dist, params.spread)?;
    Ok(optimize_layout(&graph, params, fit.a, fit.b))
}
