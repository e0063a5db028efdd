//! Independent reference implementations used as test oracles.

use popviz::{Rng, Tensor};

/// Cyclic Jacobi eigensolver for a symmetric matrix; returns eigenvalues
/// descending with unit eigenvectors as columns.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

pub fn covariance(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.row_len());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    c
}

/// Sine of the angle between two unit vectors, accurate for tiny angles.
pub fn sin_angle(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(v)
        .map(|(a, b)| (b - dot * a).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Random data with a spread-out spectrum, so eigenvectors are well
/// separated.
pub fn spread_matrix(rng: &mut Rng) -> Tensor<f64> {
    let mut x = super::gaussian_matrix(rng, 50, 10);
    for i in 0..50 {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v *= 1.0 + j as f64 * 0.6;
        }
    }
    x
}

/// Brute-force POP score: 1-NN with ties going to the lowest reference
/// index.
pub fn brute_force_pop(z: &[Vec<f64>], y: &[usize], q: &[Vec<f64>], y_adv: &[usize]) -> f64 {
    let hits = q
        .iter()
        .zip(y_adv)
        .filter(|(p, &t)| {
            let mut best = (f64::INFINITY, 0);
            for (i, r) in z.iter().enumerate() {
                let d: f64 = r.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            y[best.1] == t
        })
        .count();
    hits as f64 / q.len() as f64
}
