mod common;

use popviz::attacks::{bim, cw_l2, cw_margin, fgsm, quantize, AttackBudget, CwConfig};
use popviz::model::{Architecture, Classifier, LayerSpec};
use popviz::Tensor;

fn linear(inputs: usize, w: Vec<f32>, b: Vec<f32>) -> Classifier {
    let arch = Architecture {
        input_shape: vec![inputs],
        layers: vec![LayerSpec::Affine { inputs, outputs: 2 }],
    };
    Classifier::from_parts(
        arch,
        vec![Tensor::new(vec![inputs, 2], w).unwrap(), Tensor::new(vec![2], b).unwrap()],
    )
    .unwrap()
}

fn unquantized(epsilon: f32, alpha: f32, iterations: usize) -> AttackBudget {
    AttackBudget { epsilon, alpha, iterations, quantize: None, ..AttackBudget::default() }
}

#[test]
fn fgsm_on_one_feature_logistic_model() {
    // Class 1 logit grows with x, so the loss for label 0 increases with x.
    let model = linear(1, vec![0.0, 3.0], vec![0.0, -1.5]);
    let x = Tensor::new(vec![2, 1], vec![0.2, 0.3]).unwrap();
    let out = fgsm(&model, &x, &[0, 0], &unquantized(0.1, 0.1, 1)).unwrap();
    for (a, b) in out.x_adv.data().iter().zip([0.3f32, 0.4]) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn zero_budget_returns_quantized_input() {
    let model = linear(1, vec![0.0, 3.0], vec![0.0, -1.5]);
    let x = quantize(&Tensor::new(vec![3, 1], vec![0.1, 0.5, 0.9]).unwrap(), 256).unwrap();
    let budget = AttackBudget { epsilon: 0.0, alpha: 0.0, ..AttackBudget::default() };
    assert_eq!(fgsm(&model, &x, &[0, 0, 1], &budget).unwrap().x_adv, x);
}

#[test]
fn cw_finds_the_hyperplane_distance() {
    // Decision boundary x0 + x1 = 1; class 1 on the far side.
    let model = linear(2, vec![0.0, 2.0, 0.0, 2.0], vec![0.0, -2.0]);
    let points = [[0.3f32, 0.3], [0.2, 0.5], [0.7, 0.6]];
    let labels = [0, 0, 1];
    let x = Tensor::from_rows(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
    let cfg = CwConfig { learning_rate: 0.01, max_iterations: 1000, ..CwConfig::default() };
    let out = cw_l2(&model, &x, &labels, &cfg).unwrap();
    for (i, p) in points.iter().enumerate() {
        let exact = (p[0] + p[1] - 1.0).abs() / 2f32.sqrt();
        assert!(out.success[i], "point {i} not flipped");
        assert!(
            (out.l2[i] - exact).abs() <= 0.1 * exact,
            "point {i}: {} vs {exact}",
            out.l2[i]
        );
    }
}

#[test]
fn cw_keeps_already_misclassified_input() {
    let model = linear(2, vec![0.0, 2.0, 0.0, 2.0], vec![0.0, -2.0]);
    let x = Tensor::from_rows(&[vec![0.8f32, 0.8]]);
    let out = cw_l2(&model, &x, &[0], &CwConfig::default()).unwrap();
    assert!(out.success[0]);
    assert_eq!(out.l2[0], 0.0);
}

#[test]
fn desk_attack_invariants() {
    let (model, _, test) = common::small_setup(30, 8, 2);
    let x = test.images();
    let y = test.labels();
    let before = (x.clone(), model.clone());
    let eps = 8.0 / 255.0;

    let budget = unquantized(eps, 2.0 / 255.0, 5);
    for out in [fgsm(&model, x, y, &budget).unwrap(), bim(&model, x, y, &budget).unwrap()] {
        for (a, b) in out.x_adv.data().iter().zip(x.data()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - b).abs() <= eps, "L-infinity bound broken: {}", (a - b).abs());
        }
    }
    let quantized = AttackBudget { epsilon: eps, alpha: 2.0 / 255.0, ..AttackBudget::default() };
    let out = bim(&model, x, y, &quantized).unwrap();
    assert!(out.linf.iter().all(|&d| d <= eps + 1.0 / 510.0 + 1e-6));

    let one_step = unquantized(eps, eps, 1);
    assert_eq!(
        bim(&model, x, y, &one_step).unwrap().x_adv,
        fgsm(&model, x, y, &one_step).unwrap().x_adv
    );

    let cfg = CwConfig { max_iterations: 50, binary_search_steps: 3, ..CwConfig::default() };
    let cw = cw_l2(&model, x, y, &cfg).unwrap();
    let logits = model.logits(&cw.x_adv).unwrap();
    for i in 0..cw.len() {
        let recomputed: f32 = cw
            .x_adv
            .row(i)
            .iter()
            .zip(x.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!((recomputed - cw.l2[i]).abs() < 1e-5);
        if cw.success[i] {
            assert!(cw_margin(logits.row(i), y[i], 0.0).0 <= 0.0);
        }
    }
    assert_eq!(cw_l2(&model, x, y, &cfg).unwrap(), cw);
    assert_eq!((x.clone(), model.clone()), before);
}
