mod common;

use popviz::dimred::{fit_ab, umap_embed, umap_graph, umap_transform, UmapConfig};
use popviz::{Rng, Tensor};

fn blobs(rng: &mut Rng, per: usize, dim: usize, gap: f64) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..2 * per)
        .map(|i| {
            let shift = if i < per { 0.0 } else { gap };
            (0..dim).map(|d| rng.gaussian() + if d == 0 { shift } else { 0.0 }).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

fn diameter(y: &Tensor<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..y.rows() {
        for j in 0..i {
            let d: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.max(d.sqrt());
        }
    }
    best
}

#[test]
fn sigma_search_hits_log2_k() {
    let x = common::gaussian_matrix(&mut Rng::new(1), 150, 8);
    for k in [5, 15] {
        let g = umap_graph(&x, k).unwrap();
        let target = (k as f64).log2();
        for i in 0..150 {
            let sum: f64 = g.knn_dists[i]
                .iter()
                .map(|&d| (-(d - g.rho[i]).max(0.0) / g.sigma[i]).exp())
                .sum();
            assert!((sum - target).abs() < 1e-3, "row {i}: {sum} vs {target}");
        }
        for (i, j, w) in g.p.entries() {
            assert!(w > 0.0 && w <= 1.0);
            assert_eq!(w, g.p.get(j, i), "asymmetric at ({i}, {j})");
        }
    }
}

#[test]
fn curve_fit_residual_is_small() {
    let (_, _, rms) = fit_ab(0.1, 1.0).unwrap();
    assert!(rms < 0.05, "rms {rms}");
}

#[test]
fn blobs_embed_separably_and_deterministically() {
    let x = blobs(&mut Rng::new(2), 60, 20, 15.0);
    let cfg = UmapConfig::default();
    let (y, model) = umap_embed(&x, &cfg).unwrap();
    let centroid = |lo: usize| -> Vec<f64> {
        (0..2).map(|k| (lo..lo + 60).map(|i| y.row(i)[k]).sum::<f64>() / 60.0).collect()
    };
    let (c0, c1) = (centroid(0), centroid(60));
    for i in 0..120 {
        let d = |c: &[f64]| (0..2).map(|k| (y.row(i)[k] - c[k]).powi(2)).sum::<f64>();
        assert_eq!(i < 60, d(&c0) < d(&c1), "point {i} sits nearer the other blob");
    }
    let (again, _) = umap_embed(&x, &cfg).unwrap();
    assert_eq!(again, y);

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (serial, _) = single.install(|| umap_embed(&x, &cfg)).unwrap();
    assert_eq!(serial, y);

    let t = umap_transform(&model, &x).unwrap();
    let tol = 0.1 * diameter(&y);
    for i in 0..120 {
        let d: f64 = t.row(i).iter().zip(y.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(d.sqrt() <= tol, "point {i} moved {} (> {tol})", d.sqrt());
    }
    assert_eq!(umap_transform(&model, &x).unwrap(), t);
}
