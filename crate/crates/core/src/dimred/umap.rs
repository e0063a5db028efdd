use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{exact_knn, sq_dist};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const SIGMA_TOL: f64 = 1e-6;
const SIGMA_STEPS: usize = 200;
const GRAD_CLIP: f64 = 4.0;
const SPECTRAL_OVERSAMPLE: usize = 16;
const SPECTRAL_MAX_ITER: usize = 2000;
const SPECTRAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f64,
    pub repulsion_strength: f64,
    /// Optimization epochs per out-of-sample point.
    pub transform_epochs: usize,
    pub dims: usize,
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            epochs: 500,
            negative_samples: 5,
            learning_rate: 1.0,
            repulsion_strength: 1.0,
            transform_epochs: 100,
            dims: 2,
            seed: 0,
        }
    }
}

/// Symmetric sparse matrix in compressed-row form, columns sorted per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseGraph {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let (mut cols, mut weights) = (Vec::new(), Vec::new());
        offsets.push(0);
        for row in rows {
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        SparseGraph { offsets, cols, weights }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.weights[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, w) = self.row(i);
        c.binary_search(&j).map(|p| w[p]).unwrap_or(0.0)
    }

    /// `(row, col, weight)` for every stored entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows()).flat_map(move |i| {
            let (c, w) = self.row(i);
            c.iter().zip(w).map(move |(&j, &v)| (i, j, v))
        })
    }
}

/// The fuzzy neighbor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct UmapGraph {
    pub knn_indices: Vec<Vec<usize>>,
    pub knn_dists: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `Σ_j p_{j|i}` as reached by each σ search.
    pub row_sums: Vec<f64>,
    pub p: SparseGraph,
}

#[derive(Debug, Clone)]
pub struct UmapModel {
    pub data: Tensor<f64>,
    pub graph: UmapGraph,
    pub a: f64,
    pub b: f64,
    pub embedding: Tensor<f64>,
    pub config: UmapConfig,
}

/// Distance to the nearest neighbor at positive distance, or 0 when every
/// neighbor coincides with the point.
fn local_rho(dists: &[f64]) -> f64 {
    dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0)
}

fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    (-(d - rho).max(0.0) / sigma).exp()
}

/// Binary search for σ with `Σ_j exp(−max(0, d_j − ρ)/σ) = target`;
/// returns `(σ, reached sum)`.
fn solve_sigma(dists: &[f64], rho: f64, target: f64) -> (f64, f64) {
    let (mut lo, mut hi, mut mid) = (0f64, f64::INFINITY, 1f64);
    let mut sum = 0.0;
    for _ in 0..SIGMA_STEPS {
        sum = dists.iter().map(|&d| membership(d, rho, mid)).sum();
        if (sum - target).abs() < SIGMA_TOL {
            break;
        }
        if sum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_finite() { (lo + hi) / 2.0 } else { mid * 2.0 };
        }
    }
    (mid, sum)
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 2 || k >= n {
        return Err(Error::Input(format!(
            "n_neighbors must satisfy 2 <= k < n, got k = {k} with n = {n}"
        )));
    }
    Ok(())
}

/// Exact k-NN graph with local connectivity `ρ`, bandwidths `σ`, and the
/// probabilistic-union symmetrization `p_ij = a + b − ab`.
pub fn umap_graph(x: &Tensor<f64>, k: usize) -> Result<UmapGraph> {
    let n = x.rows();
    check_k(n, k)?;
    let (knn_indices, knn_dists) = exact_knn(x, x, k, true);
    let target = (k as f64).log2();
    let rho: Vec<f64> = knn_dists.iter().map(|d| local_rho(d)).collect();
    let (sigma, row_sums): (Vec<f64>, Vec<f64>) = knn_dists
        .par_iter()
        .zip(&rho)
        .map(|(d, &r)| solve_sigma(d, r, target))
        .unzip();

    let mut directed: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (&j, &d) in knn_indices[i].iter().zip(&knn_dists[i]) {
            directed[i].push((j, membership(d, rho[i], sigma[i])));
        }
        directed[i].sort_by_key(|e| e.0);
    }
    let lookup = |i: usize, j: usize| -> f64 {
        directed[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|p| directed[i][p].1)
            .unwrap_or(0.0)
    };
    let pairs: BTreeSet<(usize, usize)> = (0..n)
        .flat_map(|i| directed[i].iter().map(move |&(j, _)| (i.min(j), i.max(j))))
        .collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, j) in pairs {
        let (a, b) = (lookup(i, j), lookup(j, i));
        let v = 1.0 - (1.0 - a) * (1.0 - b);
        if v > 0.0 {
            rows[i].push((j, v));
            rows[j].push((i, v));
        }
    }
    for r in &mut rows {
        r.sort_by_key(|e| e.0);
    }
    Ok(UmapGraph {
        knn_indices,
        knn_dists,
        rho,
        sigma,
        row_sums,
        p: SparseGraph::from_rows(rows),
    })
}

/// Least-squares fit of `(1 + a·d^(2b))⁻¹` to the target membership curve
/// (1 up to `min_dist`, then `exp(−(d − min_dist)/spread)`) sampled at 300
/// points on `(0, 3·spread]`. Returns `(a, b, residual rms)`.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<(f64, f64, f64)> {
    if !(spread > 0.0) || !(min_dist >= 0.0) || min_dist > spread {
        return Err(Error::Input(format!(
            "need 0 <= min_dist <= spread and spread > 0, got min_dist {min_dist}, spread {spread}"
        )));
    }
    let xs: Vec<f64> = (1..=300).map(|i| 3.0 * spread * i as f64 / 300.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&d| if d < min_dist { 1.0 } else { (-(d - min_dist) / spread).exp() })
        .collect();
    let residuals = |a: f64, b: f64| -> Vec<f64> {
        xs.iter()
            .zip(&ys)
            .map(|(&d, &y)| 1.0 / (1.0 + a * d.powf(2.0 * b)) - y)
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    // Levenberg-Marquardt on two parameters.
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut r = residuals(a, b);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0f64; 2]; 2], [0f64; 2]);
        for (&d, &ri) in xs.iter().zip(&r) {
            let p = d.powf(2.0 * b);
            let f = 1.0 / (1.0 + a * p);
            let ga = -p * f * f;
            let gb = -a * p * 2.0 * d.ln() * f * f;
            let g = [ga, gb];
            for u in 0..2 {
                jtr[u] += g[u] * ri;
                for v in 0..2 {
                    jtj[u][v] += g[u] * g[v];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let da = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let db = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (na, nb) = (a + da, b + db);
            if na > 0.0 && nb > 0.0 {
                let nr = residuals(na, nb);
                let nc = cost(&nr);
                if nc < c {
                    let done = (c - nc) <= 1e-15 * c.max(1e-300);
                    a = na;
                    b = nb;
                    r = nr;
                    c = nc;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !done;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((a, b, (c / xs.len() as f64).sqrt()))
}

/// Leading eigenvectors of `D^-1/2 W D^-1/2` (subspace iteration on the
/// shifted operator `(I + ·)/2`), dropping the trivial one. `None` when the
/// iteration does not converge or produces non-finite values.
fn spectral_layout(p: &SparseGraph, dims: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    let n = p.rows();
    let want = dims + 1;
    let block = (want + SPECTRAL_OVERSAMPLE).min(n);
    if want > n {
        return None;
    }
    let degree: Vec<f64> = (0..n).map(|i| p.row(i).1.iter().sum()).collect();
    if degree.iter().any(|&d| !(d > 0.0)) {
        return None;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let apply = |v: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(n, v.ncols());
        for c in 0..v.ncols() {
            for i in 0..n {
                let (cols, w) = p.row(i);
                let mut acc = 0.0;
                for (&j, &wij) in cols.iter().zip(w) {
                    acc += wij * inv_sqrt[j] * v[(j, c)];
                }
                out[(i, c)] = 0.5 * (v[(i, c)] + inv_sqrt[i] * acc);
            }
        }
        out
    };

    let mut v = DMatrix::from_fn(n, block, |_, _| rng.gaussian());
    v = v.qr().q();
    for it in 0..SPECTRAL_MAX_ITER {
        v = apply(&v).qr().q();
        if it % 10 != 9 && it + 1 != SPECTRAL_MAX_ITER {
            continue;
        }
        let mv = apply(&v);
        let h = v.transpose() * &mv;
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let ritz = &v * &eig.eigenvectors;
        let mritz = &mv * &eig.eigenvectors;
        let residual = order[..want]
            .iter()
            .map(|&c| (mritz.column(c) - ritz.column(c) * eig.eigenvalues[c]).norm())
            .fold(0f64, f64::max);
        if !residual.is_finite() {
            return None;
        }
        if residual < SPECTRAL_TOL {
            let mut out = vec![0f64; n * dims];
            for (d, &c) in order[1..want].iter().enumerate() {
                for i in 0..n {
                    out[i * dims + d] = ritz[(i, c)];
                }
            }
            return Some(out);
        }
        let sorted = DMatrix::from_fn(n, block, |i, c| ritz[(i, order[c])]);
        v = sorted;
    }
    None
}

/// Scales an initial layout to `[0, 10]` per axis after a tiny jitter, as
/// the reference implementation does.
fn normalize_init(y: &mut [f64], dims: usize, rng: &mut Rng) {
    let max_abs = y.iter().fold(0f64, |m, v| m.max(v.abs()));
    let expansion = if max_abs > 0.0 { 10.0 / max_abs } else { 1.0 };
    for v in y.iter_mut() {
        *v = *v * expansion + 1e-4 * rng.gaussian();
    }
    for d in 0..dims {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in y.iter().skip(d).step_by(dims) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in y.iter_mut().skip(d).step_by(dims) {
            *v = 10.0 * (*v - lo) / span;
        }
    }
}

struct Edges {
    head: Vec<usize>,
    tail: Vec<usize>,
    epochs_per_sample: Vec<f64>,
}

/// Drops edges too weak to be sampled within `epochs` and converts weights
/// to sampling periods.
fn make_edges(entries: impl Iterator<Item = (usize, usize, f64)>, epochs: usize) -> Edges {
    let all: Vec<(usize, usize, f64)> = entries.collect();
    let max_w = all.iter().fold(0f64, |m, e| m.max(e.2));
    let floor = if epochs > 0 { max_w / epochs as f64 } else { 0.0 };
    let kept: Vec<&(usize, usize, f64)> = all.iter().filter(|e| e.2 > 0.0 && e.2 >= floor).collect();
    Edges {
        head: kept.iter().map(|e| e.0).collect(),
        tail: kept.iter().map(|e| e.1).collect(),
        epochs_per_sample: kept.iter().map(|e| max_w / e.2).collect(),
    }
}

#[derive(Clone, Copy)]
struct Curve {
    a: f64,
    b: f64,
    gamma: f64,
}

impl Curve {
    fn attract(&self, d2: f64) -> f64 {
        if d2 > 0.0 {
            -2.0 * self.a * self.b * d2.powf(self.b - 1.0) / (self.a * d2.powf(self.b) + 1.0)
        } else {
            0.0
        }
    }

    fn repel(&self, d2: f64) -> f64 {
        if d2 > 0.0 {
            2.0 * self.gamma * self.b / ((0.001 + d2) * (self.a * d2.powf(self.b) + 1.0))
        } else {
            0.0
        }
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Edge-sampled SGD on the fuzzy cross-entropy. With `frozen` set, tails
/// and negatives are read from it and only the heads move (`y`).
#[allow(clippy::too_many_arguments)]
fn optimize(
    y: &mut [f64],
    frozen: Option<&[f64]>,
    dims: usize,
    edges: &Edges,
    epochs: usize,
    initial_alpha: f64,
    negative_samples: usize,
    curve: Curve,
    rng: &mut Rng,
) {
    let n_vertices = frozen.map_or(y.len(), |f| f.len()) / dims.max(1);
    let ne = edges.head.len();
    let eps_neg: Vec<f64> = edges
        .epochs_per_sample
        .iter()
        .map(|e| e / negative_samples.max(1) as f64)
        .collect();
    let mut next = edges.epochs_per_sample.clone();
    let mut next_neg = eps_neg.clone();
    let mut cur = vec![0f64; dims];
    for epoch in 0..epochs {
        let alpha = initial_alpha * (1.0 - epoch as f64 / epochs as f64);
        let e_f = epoch as f64;
        for i in 0..ne {
            if next[i] > e_f {
                continue;
            }
            let (j, k) = (edges.head[i], edges.tail[i]);
            cur.copy_from_slice(&y[j * dims..(j + 1) * dims]);
            let other: Vec<f64> = match frozen {
                Some(f) => f[k * dims..(k + 1) * dims].to_vec(),
                None => y[k * dims..(k + 1) * dims].to_vec(),
            };
            let coeff = curve.attract(sq_dist(&cur, &other));
            for d in 0..dims {
                let g = clip(coeff * (cur[d] - other[d]));
                cur[d] += g * alpha;
                if frozen.is_none() {
                    y[k * dims + d] -= g * alpha;
                }
            }
            y[j * dims..(j + 1) * dims].copy_from_slice(&cur);
            next[i] += edges.epochs_per_sample[i];

            if negative_samples > 0 {
                let n_neg = ((e_f - next_neg[i]) / eps_neg[i]).floor().max(0.0) as usize;
                for _ in 0..n_neg {
                    let k = rng.below(n_vertices);
                    if frozen.is_none() && k == j {
                        continue;
                    }
                    let other = match frozen {
                        Some(f) => &f[k * dims..(k + 1) * dims],
                        None => &y[k * dims..(k + 1) * dims],
                    };
                    let d2 = sq_dist(&cur, other);
                    let coeff = curve.repel(d2);
                    for d in 0..dims {
                        let g = if coeff > 0.0 {
                            clip(coeff * (cur[d] - other[d]))
                        } else if d2 > 0.0 {
                            0.0
                        } else {
                            GRAD_CLIP
                        };
                        cur[d] += g * alpha;
                    }
                    y[j * dims..(j + 1) * dims].copy_from_slice(&cur);
                }
                next_neg[i] += n_neg as f64 * eps_neg[i];
            }
        }
    }
}

fn validate(cfg: &UmapConfig) -> Result<()> {
    if cfg.dims == 0 {
        return Err(Error::Input("embedding needs at least one dimension".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Input(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    Ok(())
}

/// Fits UMAP on `x` and returns the embedding with the reusable model.
pub fn umap_embed(x: &Tensor<f64>, cfg: &UmapConfig) -> Result<(Tensor<f64>, UmapModel)> {
    validate(cfg)?;
    let n = x.rows();
    let dims = cfg.dims;
    let graph = umap_graph(x, cfg.n_neighbors)?;
    let (a, b, _) = fit_ab(cfg.min_dist, cfg.spread)?;
    let root = Rng::new(cfg.seed);

    let mut init_rng = root.substream(1);
    let mut y = match spectral_layout(&graph.p, dims, &mut init_rng) {
        Some(layout) => layout,
        None => (0..n * dims).map(|_| 10.0 * init_rng.next_f64()).collect(),
    };
    normalize_init(&mut y, dims, &mut root.substream(2));

    let edges = make_edges(graph.p.entries(), cfg.epochs);
    let curve = Curve { a, b, gamma: cfg.repulsion_strength };
    optimize(
        &mut y,
        None,
        dims,
        &edges,
        cfg.epochs,
        cfg.learning_rate,
        cfg.negative_samples,
        curve,
        &mut root.substream(3),
    );
    let embedding = Tensor::new(vec![n, dims], y)?;
    let model = UmapModel {
        data: x.clone(),
        graph,
        a,
        b,
        embedding: embedding.clone(),
        config: cfg.clone(),
    };
    Ok((embedding, model))
}

/// Places new points against a frozen training embedding: each point starts
/// at the membership-weighted mean of its training neighbors and is refined
/// by SGD with only itself moving.
pub fn umap_transform(model: &UmapModel, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let width = model.data.row_len();
    if x.rank() != 2 || x.row_len() != width {
        return Err(Error::Dimension(format!(
            "UMAP model expects width {width}, got {:?}",
            x.shape()
        )));
    }
    let cfg = &model.config;
    let dims = cfg.dims;
    let m = x.rows();
    let k = cfg.n_neighbors.min(model.data.rows());
    let (indices, dists) = exact_knn(&model.data, x, k, false);
    let target = (k as f64).log2();
    let weights: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| {
            let rho = local_rho(d);
            let (sigma, _) = solve_sigma(d, rho, target);
            d.iter().map(|&v| membership(v, rho, sigma)).collect()
        })
        .collect();
    let max_w = weights.iter().flatten().fold(0f64, |a, &w| a.max(w));
    let frozen = model.embedding.data();
    let curve = Curve { a: model.a, b: model.b, gamma: cfg.repulsion_strength };
    let root = Rng::new(cfg.seed).substream(0x7a);
    let epochs = cfg.transform_epochs;
    let floor = if epochs > 0 { max_w / epochs as f64 } else { 0.0 };

    let mut out = vec![0f64; m * dims];
    out.par_chunks_mut(dims).enumerate().for_each(|(i, yi)| {
        let total: f64 = weights[i].iter().sum();
        for (&j, &w) in indices[i].iter().zip(&weights[i]) {
            for d in 0..dims {
                yi[d] += w / total * frozen[j * dims + d];
            }
        }
        let kept = indices[i]
            .iter()
            .zip(&weights[i])
            .filter(|(_, &w)| w > 0.0 && w >= floor);
        let edges = Edges {
            head: kept.clone().map(|_| 0).collect(),
            tail: kept.clone().map(|(&j, _)| j).collect(),
            epochs_per_sample: kept.map(|(_, &w)| max_w / w).collect(),
        };
        optimize(
            yi,
            Some(frozen),
            dims,
            &edges,
            epochs,
            cfg.learning_rate / 4.0,
            cfg.negative_samples,
            curve,
            &mut root.substream(i as u64),
        );
    });
    Tensor::new(vec![m, dims], out)
}
