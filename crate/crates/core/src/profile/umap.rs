//! Uniform manifold approximation and projection.
//!
//! Brute-force k-nearest neighbours, smooth-kNN fuzzy memberships
//! symmetrised by probabilistic union, PCA initialisation and SGD with
//! negative sampling on the low-dimensional cross-entropy. New points are
//! placed at the membership-weighted mean of their training neighbours.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    #[serde(default = "default_neighbors")]
    pub n_neighbors: usize,
    #[serde(default = "default_min_dist")]
    pub min_dist: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Defaults to 500 for up to 10k points, 200 beyond.
    #[serde(default)]
    pub n_epochs: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_negative")]
    pub negative_sample_rate: usize,
}

fn default_neighbors() -> usize {
    15
}
fn default_min_dist() -> f64 {
    0.1
}
fn default_metric() -> Metric {
    Metric::Cosine
}
fn default_lr() -> f64 {
    1.0
}
fn default_negative() -> usize {
    5
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: default_neighbors(),
            min_dist: default_min_dist(),
            metric: default_metric(),
            n_epochs: None,
            learning_rate: default_lr(),
            negative_sample_rate: default_negative(),
        }
    }
}

const SPREAD: f64 = 1.0;
const SMOOTH_ITERS: usize = 64;
const MIN_SIGMA_SCALE: f64 = 1e-3;
const GRAD_CLIP: f64 = 4.0;

/// Fits `1 / (1 + a x^(2b))` to the offset-exponential target curve.
pub fn find_ab(min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * SPREAD * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / SPREAD).exp()
            }
        })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    // golden-section in log a for each b, then in b
    let best_a = |b: f64| -> (f64, f64) {
        let (mut lo, mut hi) = (-5.0f64, 5.0f64);
        let g = 0.618_033_988_749_895;
        for _ in 0..80 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if sse(m1.exp(), b) < sse(m2.exp(), b) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let a = (0.5 * (lo + hi)).exp();
        (a, sse(a, b))
    };
    let (mut lo, mut hi) = (0.1f64, 3.0f64);
    let g = 0.618_033_988_749_895;
    for _ in 0..60 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if best_a(m1).1 < best_a(m2).1 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let b = 0.5 * (lo + hi);
    (best_a(b).0, b)
}

fn prepare(x: ArrayView2<f64>, metric: Metric) -> Array2<f64> {
    let mut out = x.to_owned();
    if metric == Metric::Cosine {
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
    }
    out
}

/// Pairwise distances between rows of `a` and rows of `b` (both prepared).
fn distances(a: &Array2<f64>, b: &Array2<f64>, metric: Metric) -> Array2<f64> {
    let dots = a.dot(&b.t());
    match metric {
        Metric::Cosine => dots.mapv(|d| (1.0 - d).max(0.0)),
        Metric::Euclidean => {
            let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
            let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
            Array2::from_shape_fn(dots.dim(), |(i, j)| {
                (na[i] + nb[j] - 2.0 * dots[[i, j]]).max(0.0).sqrt()
            })
        }
    }
}

/// `k` nearest `(index, distance)` pairs of every row, ties by index.
fn knn(dist: &Array2<f64>, k: usize, skip_self: bool) -> Vec<Vec<(usize, f64)>> {
    dist.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut cand: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| !(skip_self && j == i))
                .map(|(j, &d)| (j, d))
                .collect();
            cand.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            cand.truncate(k);
            cand
        })
        .collect()
}

/// Local connectivity `rho` and bandwidth `sigma` so that the memberships
/// of the neighbours sum to `log2(k)`.
fn smooth_knn(neigh: &[(usize, f64)], mean_dist: f64) -> (f64, f64) {
    let k = neigh.len();
    let target = (k as f64).log2();
    let rho = neigh
        .iter()
        .map(|&(_, d)| d)
        .find(|&d| d > 0.0)
        .unwrap_or(0.0);
    let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..SMOOTH_ITERS {
        let psum: f64 = neigh
            .iter()
            .map(|&(_, d)| (-((d - rho).max(0.0)) / sigma).exp())
            .sum();
        if (psum - target).abs() < 1e-5 {
            break;
        }
        if psum > target {
            hi = sigma;
            sigma = 0.5 * (lo + hi);
        } else {
            lo = sigma;
            sigma = if hi.is_infinite() {
                sigma * 2.0
            } else {
                0.5 * (lo + hi)
            };
        }
    }
    (rho, sigma.max(MIN_SIGMA_SCALE * mean_dist))
}

fn memberships(neigh: &[(usize, f64)], mean_dist: f64) -> Vec<(usize, f64)> {
    let (rho, sigma) = smooth_knn(neigh, mean_dist);
    neigh
        .iter()
        .map(|&(j, d)| (j, (-((d - rho).max(0.0)) / sigma).exp()))
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) struct UmapFit {
    params: UmapParams,
    train: Array2<f64>,
    embedding: Array2<f64>,
    mean_dist: f64,
    exact: HashMap<Vec<u64>, usize>,
}

fn row_key(row: ndarray::ArrayView1<f64>) -> Vec<u64> {
    row.iter().map(|x| x.to_bits()).collect()
}

impl UmapFit {
    pub(crate) fn fit(x: ArrayView2<f64>, d: usize, params: &UmapParams, seed: u64) -> Self {
        let n = x.nrows();
        let train = prepare(x, params.metric);
        let dist = distances(&train, &train, params.metric);
        let k = params.n_neighbors.min(n - 1).max(1);
        let neigh = knn(&dist, k, true);
        let mean_dist = dist.mean().unwrap_or(1.0);

        // probabilistic union of the directed memberships
        let mut directed: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, nb) in neigh.iter().enumerate() {
            for (j, w) in memberships(nb, mean_dist) {
                directed.insert((i, j), w);
            }
        }
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        for (&(i, j), &w) in &directed {
            let wt = directed.get(&(j, i)).copied().unwrap_or(0.0);
            edges.push((i, j, w + wt - w * wt));
            if !directed.contains_key(&(j, i)) {
                edges.push((j, i, w + wt - w * wt));
            }
        }
        edges.sort_by_key(|e| (e.0, e.1));

        let n_epochs = params
            .n_epochs
            .unwrap_or(if n <= 10_000 { 500 } else { 200 });
        let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
        edges.retain(|e| e.2 >= max_w / n_epochs as f64);

        let mut y = Self::init(&train, d, seed);
        let (a, b) = find_ab(params.min_dist);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_0a11);
        let eps: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
        let neg_rate = params.negative_sample_rate as f64;
        let mut next_sample = eps.clone();
        let mut next_neg: Vec<f64> = eps.iter().map(|e| e / neg_rate).collect();
        let mut delta = vec![0.0; d];
        for epoch in 0..n_epochs {
            let ep = epoch as f64;
            let alpha = params.learning_rate * (1.0 - ep / n_epochs as f64);
            for (e, &(i, j, _)) in edges.iter().enumerate() {
                if next_sample[e] > ep {
                    continue;
                }
                let d2 = sq_dist(&y, i, j);
                let coeff = if d2 > 0.0 {
                    -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
                } else {
                    0.0
                };
                for c in 0..d {
                    let g = (coeff * (y[[i, c]] - y[[j, c]])).clamp(-GRAD_CLIP, GRAD_CLIP);
                    y[[i, c]] += g * alpha;
                    y[[j, c]] -= g * alpha;
                }
                next_sample[e] += eps[e];

                let n_neg = ((ep - next_neg[e]) / (eps[e] / neg_rate)).floor().max(0.0) as usize;
                for _ in 0..n_neg {
                    let k = rng.random_range(0..n);
                    if k == i {
                        continue;
                    }
                    let d2 = sq_dist(&y, i, k);
                    for c in 0..d {
                        delta[c] = if d2 > 0.0 {
                            let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                            (coeff * (y[[i, c]] - y[[k, c]])).clamp(-GRAD_CLIP, GRAD_CLIP)
                        } else {
                            GRAD_CLIP
                        };
                    }
                    for c in 0..d {
                        y[[i, c]] += delta[c] * alpha;
                    }
                }
                next_neg[e] += n_neg as f64 * eps[e] / neg_rate;
            }
        }
        let exact = x
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (row_key(r), i))
            .collect();
        Self {
            params: params.clone(),
            train,
            embedding: y,
            mean_dist,
            exact,
        }
    }

    /// Leading principal directions of the inputs scaled to `[-10, 10]`,
    /// plus a small seeded jitter so coincident points separate.
    fn init(train: &Array2<f64>, d: usize, seed: u64) -> Array2<f64> {
        let pca = super::projection::PcaFit::fit(train.view(), d.min(train.ncols()));
        let mut y = Array2::zeros((train.nrows(), d));
        let proj = pca.transform(train.view());
        y.slice_mut(ndarray::s![.., ..proj.ncols()]).assign(&proj);
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            y *= 10.0 / scale;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        y.mapv_inplace(|v| v + 1e-4 * (rng.random::<f64>() - 0.5));
        y
    }

    pub(crate) fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let d = self.embedding.ncols();
        let mut out = Array2::zeros((x.nrows(), d));
        let mut pending = Vec::new();
        for (r, row) in x.rows().into_iter().enumerate() {
            match self.exact.get(&row_key(row)) {
                Some(&i) => out.row_mut(r).assign(&self.embedding.row(i)),
                None => pending.push(r),
            }
        }
        if pending.is_empty() {
            return out;
        }
        let sel = x.select(Axis(0), &pending);
        let prepared = prepare(sel.view(), self.params.metric);
        let dist = distances(&prepared, &self.train, self.params.metric);
        let k = self.params.n_neighbors.min(self.train.nrows());
        for (q, nb) in knn(&dist, k, false).iter().enumerate() {
            let w = memberships(nb, self.mean_dist);
            let total: f64 = w.iter().map(|p| p.1).sum();
            let mut dst = out.row_mut(pending[q]);
            for (j, wj) in w {
                dst.scaled_add(wj / total, &self.embedding.row(j));
            }
        }
        out
    }

    pub(crate) fn params(&self) -> &UmapParams {
        &self.params
    }
}

fn sq_dist(y: &Array2<f64>, i: usize, j: usize) -> f64 {
    y.row(i)
        .iter()
        .zip(y.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}
