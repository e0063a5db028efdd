mod common;

use popviz::dimred::{tsne_affinities, tsne_conditional, tsne_embed, TsneConfig};
use popviz::{Rng, Tensor};

/// Perplexity recomputed from a conditional row: exp of its entropy in nats.
fn row_perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

#[test]
fn calibrated_rows_hit_target_perplexity() {
    let x = common::gaussian_matrix(&mut Rng::new(5), 100, 5);
    for target in [5.0, 30.0] {
        let cond = tsne_conditional(&x, target).unwrap();
        for i in 0..100 {
            let row = cond.p.row(i);
            assert_eq!(row[i], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let achieved = row_perplexity(row);
            assert!(
                (achieved - target).abs() / target < 1e-4,
                "row {i}: perplexity {achieved} for target {target}"
            );
        }
    }
}

#[test]
fn joint_affinities_are_a_symmetric_distribution() {
    let x = common::gaussian_matrix(&mut Rng::new(6), 100, 5);
    let p = tsne_affinities(&x, 30.0).unwrap();
    let total: f64 = p.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-9, "sum {total}");
    for i in 0..100 {
        assert_eq!(p.row(i)[i], 0.0);
        for j in 0..100 {
            assert!(p.row(i)[j] >= 0.0);
            assert_eq!(p.row(i)[j], p.row(j)[i]);
        }
    }
}

#[test]
fn kl_decreases_after_exaggeration() {
    let x = common::gaussian_matrix(&mut Rng::new(8), 120, 6);
    for seed in 0..5 {
        let cfg = TsneConfig { perplexity: 20.0, seed, ..TsneConfig::default() };
        let res = tsne_embed(&x, &cfg).unwrap();
        assert!(
            res.kl_final <= res.kl_after_exaggeration,
            "seed {seed}: {} > {}",
            res.kl_final,
            res.kl_after_exaggeration
        );
        assert!(res.embedding.all_finite());
    }
}

#[test]
fn separated_blobs_stay_separated() {
    let mut rng = Rng::new(9);
    let mut rows = Vec::new();
    for i in 0..80 {
        let shift = if i < 40 { 0.0 } else { 20.0 };
        rows.push((0..64).map(|d| rng.gaussian() + if d == 0 { shift } else { 0.0 }).collect());
    }
    let x = Tensor::from_rows(&rows);
    let y = tsne_embed(&x, &TsneConfig { perplexity: 15.0, ..TsneConfig::default() })
        .unwrap()
        .embedding;
    for i in 0..80 {
        let nearest = (0..80)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| (0..2).map(|k| (y.row(i)[k] - y.row(j)[k]).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(i < 40, nearest < 40, "point {i} has a neighbor across blobs");
    }
}

#[test]
fn other_dimensions_are_supported_or_rejected() {
    let x = common::gaussian_matrix(&mut Rng::new(10), 30, 4);
    let cfg = TsneConfig { perplexity: 5.0, iterations: 300, ..TsneConfig::default() };
    for dims in 1..=3 {
        let res = tsne_embed(&x, &TsneConfig { dims, ..cfg.clone() }).unwrap();
        assert_eq!(res.embedding.shape(), &[30, dims]);
    }
    assert!(tsne_embed(&x, &TsneConfig { dims: 4, ..cfg }).is_err());
}
