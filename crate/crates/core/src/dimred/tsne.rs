//! Exact t-SNE: perplexity-calibrated Gaussian affinities in the input
//! space, Student-t affinities in the embedding, gradient descent on
//! KL(P‖Q) with momentum and per-coordinate gains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sq_dist;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const PERPLEXITY_TOL: f64 = 1e-6;
const MAX_BINARY_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;
const KL_FLOOR: f64 = 1e-12;
const PAIR_BLOCKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// `None` selects `max(n / 48, 50)`.
    pub learning_rate: Option<f64>,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: None,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            dims: 2,
            seed: 0,
        }
    }
}

/// Row-conditional affinities `p_{j|i}` and the perplexity each row reached.
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    /// `[n, n]`, rows sum to 1, zero diagonal.
    pub p: Tensor<f64>,
    pub perplexity: Vec<f64>,
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(Error::Input(format!(
            "perplexity {perplexity} must lie strictly between 1 and n = {n}"
        )));
    }
    Ok(())
}

fn pairwise_sq(x: &Tensor<f64>) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0f64; n * n];
    d.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sq_dist(x.row(i), x.row(j));
        }
    });
    d
}

/// Fills `out` with `p_{j|i}` for one row and returns the achieved
/// perplexity. Rows whose off-diagonal distances are all equal (including
/// duplicate points) get the uniform distribution.
fn calibrate_row(i: usize, dist: &[f64], perplexity: f64, out: &mut [f64]) -> f64 {
    let n = dist.len();
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (j, &d) in dist.iter().enumerate() {
        if j != i {
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    if dmax - dmin <= 1e-12 * dmax.max(1.0) {
        let u = 1.0 / (n - 1) as f64;
        for (j, o) in out.iter_mut().enumerate() {
            *o = if j == i { 0.0 } else { u };
        }
        return (n - 1) as f64;
    }
    let target = perplexity.ln();
    let (mut lo, mut hi) = (0f64, f64::INFINITY);
    let mut beta = 1.0 / ((dmax - dmin) / 2.0).max(f64::MIN_POSITIVE);
    let mut entropy = 0.0;
    for _ in 0..MAX_BINARY_STEPS {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            if j == i {
                *o = 0.0;
                continue;
            }
            let shifted = dist[j] - dmin;
            let v = (-beta * shifted).exp();
            *o = v;
            sum += v;
            weighted += v * shifted;
        }
        entropy = sum.ln() + beta * weighted / sum;
        for o in out.iter_mut() {
            *o /= sum;
        }
        let diff = entropy - target;
        if diff.abs() < PERPLEXITY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (lo + hi) / 2.0;
        }
    }
    entropy.exp()
}

/// Per-row binary search for the Gaussian precision that hits `perplexity`.
pub fn tsne_conditional(x: &Tensor<f64>, perplexity: f64) -> Result<ConditionalAffinities> {
    let n = x.rows();
    check_perplexity(n, perplexity)?;
    let dist = pairwise_sq(x);
    let mut p = vec![0f64; n * n];
    let perp: Vec<f64> = p
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| calibrate_row(i, &dist[i * n..(i + 1) * n], perplexity, row))
        .collect();
    Ok(ConditionalAffinities {
        p: Tensor::new(vec![n, n], p)?,
        perplexity: perp,
    })
}

/// Joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`, exactly symmetric.
pub fn tsne_affinities(x: &Tensor<f64>, perplexity: f64) -> Result<Tensor<f64>> {
    let cond = tsne_conditional(x, perplexity)?;
    let n = x.rows();
    let c = cond.p.data();
    let mut p = vec![0f64; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in i + 1..n {
            let v = (c[i * n + j] + c[j * n + i]) / denom;
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], p)
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub embedding: Tensor<f64>,
    /// KL(P‖Q) after the last exaggerated iteration.
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
}

/// Row sums of the Student-t kernel `(1 + ‖y_i − y_j‖²)⁻¹`, excluding the
/// diagonal, and the sum over all pairs.
fn kernel_sum<const D: usize>(y: &[[f64; D]]) -> f64 {
    let rows: Vec<f64> = y
        .par_iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut s = 0.0;
            for (j, yj) in y.iter().enumerate() {
                if j != i {
                    s += 1.0 / (1.0 + dist2(yi, yj));
                }
            }
            s
        })
        .collect();
    rows.iter().sum()
}

#[inline(always)]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let t = a[d] - b[d];
        s += t * t;
    }
    s
}

fn kl_divergence<const D: usize>(p: &[f64], y: &[[f64; D]]) -> f64 {
    let n = y.len();
    let z = kernel_sum(y);
    let rows: Vec<f64> = y
        .par_iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut s = 0.0;
            for (j, yj) in y.iter().enumerate() {
                let pv = p[i * n + j];
                if pv > 0.0 {
                    let q = 1.0 / ((1.0 + dist2(yi, yj)) * z);
                    s += pv * (pv.max(KL_FLOOR) / q.max(KL_FLOOR)).ln();
                }
            }
            s
        })
        .collect();
    rows.iter().sum()
}

/// Splits rows into a fixed number of contiguous ranges holding roughly
/// equal numbers of upper-triangle pairs. The split depends only on `n`, so
/// reductions over blocks are independent of the thread count.
fn pair_blocks(n: usize) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let per = total.div_ceil(PAIR_BLOCKS).max(1);
    let mut out = Vec::with_capacity(PAIR_BLOCKS);
    let (mut start, mut acc) = (0, 0);
    for i in 0..n {
        acc += n - 1 - i;
        if acc >= per {
            out.push((start, i + 1));
            start = i + 1;
            acc = 0;
        }
    }
    if start < n {
        out.push((start, n));
    }
    out
}

/// Unscaled gradient terms: `Σ_j e·p_ij·w_ij (y_i − y_j)`,
/// `Σ_j w_ij² (y_i − y_j)` with `w_ij = (1 + ‖y_i − y_j‖²)⁻¹`, and
/// `Z = Σ_{i≠j} w_ij`, visiting each unordered pair once.
#[allow(clippy::type_complexity)]
fn attraction_repulsion<const D: usize>(
    p: &[f64],
    y: &[[f64; D]],
    exaggeration: f64,
    blocks: &[(usize, usize)],
) -> (Vec<[f64; D]>, Vec<[f64; D]>, f64) {
    let n = y.len();
    let partials: Vec<(Vec<[f64; D]>, Vec<[f64; D]>, f64)> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut att = vec![[0f64; D]; n];
            let mut rep = vec![[0f64; D]; n];
            let mut z = 0.0;
            for i in lo..hi {
                let yi = y[i];
                let prow = &p[i * n..(i + 1) * n];
                let (mut ai, mut ri) = ([0f64; D], [0f64; D]);
                for j in i + 1..n {
                    let yj = &y[j];
                    let w = 1.0 / (1.0 + dist2(&yi, yj));
                    let (wa, wr) = (exaggeration * prow[j] * w, w * w);
                    z += w;
                    for d in 0..D {
                        let diff = yi[d] - yj[d];
                        ai[d] += wa * diff;
                        ri[d] += wr * diff;
                        att[j][d] -= wa * diff;
                        rep[j][d] -= wr * diff;
                    }
                }
                for d in 0..D {
                    att[i][d] += ai[d];
                    rep[i][d] += ri[d];
                }
            }
            (att, rep, 2.0 * z)
        })
        .collect();
    let mut att = vec![[0f64; D]; n];
    let mut rep = vec![[0f64; D]; n];
    let mut z = 0.0;
    for (pa, pr, pz) in partials {
        for i in 0..n {
            for d in 0..D {
                att[i][d] += pa[i][d];
                rep[i][d] += pr[i][d];
            }
        }
        z += pz;
    }
    (att, rep, z)
}

/// Embeds `x` with exact t-SNE into 1 to 3 dimensions.
pub fn tsne_embed(x: &Tensor<f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    if cfg.iterations < cfg.exaggeration_iterations {
        return Err(Error::Input(format!(
            "iterations ({}) must cover the exaggeration phase ({})",
            cfg.iterations, cfg.exaggeration_iterations
        )));
    }
    match cfg.dims {
        1 => embed::<1>(x, cfg),
        2 => embed::<2>(x, cfg),
        3 => embed::<3>(x, cfg),
        d => Err(Error::Unsupported(format!(
            "t-SNE embeds into 1 to 3 dimensions, {d} requested"
        ))),
    }
}

fn embed<const D: usize>(x: &Tensor<f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.rows();
    let p = tsne_affinities(x, cfg.perplexity)?;
    let p = p.data();
    let lr = cfg.learning_rate.unwrap_or_else(|| (n as f64 / 48.0).max(50.0));

    let mut rng = Rng::new(cfg.seed);
    let mut y: Vec<[f64; D]> = (0..n)
        .map(|_| std::array::from_fn(|_| 1e-4 * rng.gaussian()))
        .collect();
    let mut update = vec![[0f64; D]; n];
    let mut gains = vec![[1f64; D]; n];
    let mut kl_after_exaggeration = f64::NAN;
    let blocks = pair_blocks(n);

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.momentum_switch {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let (att, rep, z) = attraction_repulsion(p, &y, exaggeration, &blocks);
        for i in 0..n {
            for d in 0..D {
                let g = 4.0 * (att[i][d] - rep[i][d] / z);
                let (u, gain) = (&mut update[i][d], &mut gains[i][d]);
                if *u * g < 0.0 {
                    *gain += 0.2;
                } else {
                    *gain *= 0.8;
                }
                *gain = gain.max(MIN_GAIN);
                *u = momentum * *u - lr * *gain * g;
                y[i][d] += *u;
            }
        }
        if it + 1 == cfg.exaggeration_iterations {
            kl_after_exaggeration = kl_divergence(p, &y);
        }
    }
    let kl_final = kl_divergence(p, &y);
    if cfg.exaggeration_iterations == 0 {
        kl_after_exaggeration = kl_final;
    }
    Ok(TsneResult {
        embedding: Tensor::new(vec![n, D], y.into_iter().flatten().collect())?,
        kl_after_exaggeration,
        kl_final,
    })
}
