//! Untargeted evasion attacks: FGSM, BIM, and Carlini-Wagner L2.
//!
//! Attacks run over fixed-size chunks of examples, each on its own tape, so
//! results are identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape};
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier};
use crate::tensor::Tensor;

const ATTACK_CHUNK: usize = 32;

/// Nudge applied to inputs before the tanh change of variables.
const TANH_MARGIN: f32 = 1e-6;

/// L∞ budget for FGSM and BIM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBudget {
    pub epsilon: f32,
    /// BIM step size.
    pub alpha: f32,
    /// BIM iteration count.
    pub iterations: usize,
    pub clip_min: f32,
    pub clip_max: f32,
    /// Number of quantization levels, `None` for no quantization.
    pub quantize: Option<u32>,
}

impl Default for AttackBudget {
    /// The FGSM/BIM settings used for CIFAR-10: ε = 3/255, α = 1/255, 10 steps.
    fn default() -> Self {
        AttackBudget {
            epsilon: 3.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 10,
            clip_min: 0.0,
            clip_max: 1.0,
            quantize: Some(256),
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.alpha >= 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Input(format!(
                "attack budget needs 0 <= alpha ({}) <= epsilon ({})",
                self.alpha, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Input("BIM needs at least one iteration".into()));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::Input("clip range is empty".into()));
        }
        if let Some(l) = self.quantize {
            check_levels(l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwConfig {
    pub learning_rate: f32,
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub initial_const: f32,
    /// Confidence margin κ.
    pub confidence: f32,
    /// Stop an example's inner loop once its loss stalls (checked every
    /// `max_iterations / 10` steps).
    pub abort_early: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            learning_rate: 0.005,
            binary_search_steps: 5,
            max_iterations: 1000,
            initial_const: 1.0,
            confidence: 0.0,
            abort_early: true,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.initial_const > 0.0 && self.confidence >= 0.0)
            || self.binary_search_steps == 0
            || self.max_iterations == 0
        {
            return Err(Error::Input(format!("invalid CW configuration {self:?}")));
        }
        Ok(())
    }
}

/// Attack output with per-example bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub x_adv: Tensor<f32>,
    /// Model predictions on `x_adv`.
    pub predictions: Vec<usize>,
    /// `predictions[i] != y[i]`.
    pub success: Vec<bool>,
    pub linf: Vec<f32>,
    pub l2: Vec<f32>,
}

impl AdversarialBatch {
    fn assemble(model: &Classifier, x: &Tensor<f32>, y: &[usize], x_adv: Tensor<f32>) -> Result<Self> {
        let (predictions, _) = model.predict(&x_adv)?;
        let success = predictions.iter().zip(y).map(|(p, t)| p != t).collect();
        let (linf, l2) = perturbation_norms(x, &x_adv);
        Ok(AdversarialBatch {
            x_adv,
            predictions,
            success,
            linf,
            l2,
        })
    }

    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        success_rate(&self.success)
    }

    pub fn mean_l2(&self) -> f64 {
        self.l2.iter().map(|&v| v as f64).sum::<f64>() / self.l2.len().max(1) as f64
    }
}

/// Per-example L∞ and L2 norms of `x_adv − x`.
pub fn perturbation_norms(x: &Tensor<f32>, x_adv: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    (0..x.rows())
        .map(|i| {
            let mut linf = 0f32;
            let mut sq = 0f64;
            for (&a, &b) in x.row(i).iter().zip(x_adv.row(i)) {
                let d = b - a;
                linf = linf.max(d.abs());
                sq += (d as f64) * (d as f64);
            }
            (linf, sq.sqrt() as f32)
        })
        .unzip()
}

/// Mean of a success mask; accuracy after attack is `1 − success_rate`.
pub fn success_rate(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&s| s).count() as f64 / mask.len() as f64
}

fn check_levels(levels: u32) -> Result<()> {
    if levels < 2 {
        return Err(Error::Input(format!("quantization needs at least 2 levels, got {levels}")));
    }
    Ok(())
}

/// Rounds each value to the nearest of `levels` evenly spaced points in [0, 1].
pub fn quantize(x: &Tensor<f32>, levels: u32) -> Result<Tensor<f32>> {
    check_levels(levels)?;
    let steps = (levels - 1) as f32;
    Ok(x.map(|v| (v * steps).round() / steps))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `v` toward `target` until `|v − target| <= eps` holds in f32.
fn into_ball(v: f32, target: f32, eps: f32) -> f32 {
    let mut v = v.clamp(target - eps, target + eps);
    while (v - target).abs() > eps {
        v = if v > target { v.next_down() } else { v.next_up() };
    }
    v
}

fn check_batch(model: &Classifier, x: &Tensor<f32>, y: &[usize]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Dimension(format!("{} inputs but {} labels", x.rows(), y.len())));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::Input(format!("label {l} out of range")));
    }
    Ok(())
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(ATTACK_CHUNK)
        .map(|s| s..(s + ATTACK_CHUNK).min(n))
        .collect()
}

/// Gradient of the summed cross-entropy with respect to the input.
fn input_gradient(model: &Classifier, x: Tensor<f32>, y: &[usize]) -> Result<Tensor<f32>> {
    let n = y.len();
    let mut tape = Tape::new();
    let fv = model.forward_frozen(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(fv.logits, y)?;
    let total = tape.scale(loss, n as f32);
    let mut grads = tape.backward(total)?;
    Ok(grads.take(fv.input).expect("input reaches the loss"))
}

/// One signed-gradient step from `cur`, projected into the ε-ball around
/// `origin` and the clip range.
fn signed_step(origin: &[f32], cur: &mut [f32], grad: &[f32], step: f32, budget: &AttackBudget) {
    for ((c, &o), &g) in cur.iter_mut().zip(origin).zip(grad) {
        let moved = *c + step * sign(g);
        *c = into_ball(moved, o, budget.epsilon).clamp(budget.clip_min, budget.clip_max);
    }
}

fn iterate_signed(
    model: &Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    step: f32,
    iterations: usize,
    budget: &AttackBudget,
) -> Result<Tensor<f32>> {
    check_batch(model, x, y)?;
    let parts: Vec<Vec<f32>> = chunk_ranges(x.rows())
        .into_par_iter()
        .map(|r| -> Result<Vec<f32>> {
            let idx: Vec<usize> = r.clone().collect();
            let origin = x.select_rows(&idx);
            let mut cur = origin.clone();
            for _ in 0..iterations {
                let g = input_gradient(model, cur.clone(), &y[r.clone()])?;
                signed_step(origin.data(), cur.data_mut(), g.data(), step, budget);
            }
            Ok(cur.into_data())
        })
        .collect::<Result<_>>()?;
    let mut x_adv = Tensor::new(x.shape().to_vec(), parts.concat())?;
    if let Some(levels) = budget.quantize {
        x_adv = quantize(&x_adv, levels)?;
    }
    Ok(x_adv)
}

/// Fast gradient sign method: `x + ε·sign(∇x J)`, clipped, then quantized
/// if configured. Only `epsilon`, the clip range, and `quantize` are used.
pub fn fgsm(model: &Classifier, x: &Tensor<f32>, y: &[usize], budget: &AttackBudget) -> Result<AdversarialBatch> {
    let fgsm_budget = AttackBudget {
        alpha: budget.epsilon,
        iterations: 1,
        ..budget.clone()
    };
    fgsm_budget.validate()?;
    let x_adv = iterate_signed(model, x, y, budget.epsilon, 1, &fgsm_budget)?;
    AdversarialBatch::assemble(model, x, y, x_adv)
}

/// Basic iterative method: `iterations` signed steps of size `alpha`, each
/// projected into the ε-ball and clip range.
pub fn bim(model: &Classifier, x: &Tensor<f32>, y: &[usize], budget: &AttackBudget) -> Result<AdversarialBatch> {
    budget.validate()?;
    let x_adv = iterate_signed(model, x, y, budget.alpha, budget.iterations, budget)?;
    AdversarialBatch::assemble(model, x, y, x_adv)
}

/// Untargeted margin `max(Z_y − max_{i≠y} Z_i, −κ)` and the competing class.
pub fn cw_margin(logits: &[f32], label: usize, confidence: f32) -> (f32, usize) {
    let mut other = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if i != label && (other == usize::MAX || v > logits[other]) {
            other = i;
        }
    }
    ((logits[label] - logits[other]).max(-confidence), other)
}

/// Carlini-Wagner L2 attack with tanh box reparameterization and a binary
/// search over the trade-off constant. Returns, per example, the smallest
/// successful perturbation found, or the unchanged input on failure.
pub fn cw_l2(model: &Classifier, x: &Tensor<f32>, y: &[usize], cfg: &CwConfig) -> Result<AdversarialBatch> {
    cfg.validate()?;
    check_batch(model, x, y)?;
    let parts: Vec<Vec<f32>> = chunk_ranges(x.rows())
        .into_par_iter()
        .map(|r| cw_chunk(model, &x.select_rows(&r.clone().collect::<Vec<_>>()), &y[r], cfg))
        .collect::<Result<_>>()?;
    let x_adv = Tensor::new(x.shape().to_vec(), parts.concat())?;
    AdversarialBatch::assemble(model, x, y, x_adv)
}

fn cw_chunk(model: &Classifier, x: &Tensor<f32>, y: &[usize], cfg: &CwConfig) -> Result<Vec<f32>> {
    let n = y.len();
    let width = x.row_len();
    let k = model.num_classes();
    let (initial_pred, _) = model.predict(x)?;

    let w0 = x.map(|v| {
        let v = v.clamp(TANH_MARGIN, 1.0 - TANH_MARGIN);
        (2.0 * v - 1.0).atanh()
    });

    let mut best_l2 = vec![f32::INFINITY; n];
    let mut best_x: Vec<f32> = x.data().to_vec();
    let mut lower = vec![0f32; n];
    let mut upper = vec![1e10f32; n];
    let mut c = vec![cfg.initial_const; n];
    // Inputs that are already misclassified need no perturbation.
    let done: Vec<bool> = initial_pred.iter().zip(y).map(|(p, t)| p != t).collect();
    for i in (0..n).filter(|&i| done[i]) {
        best_l2[i] = 0.0;
    }
    if done.iter().all(|&d| d) {
        return Ok(best_x);
    }

    let check_every = (cfg.max_iterations / 10).max(1);
    for _ in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let mut adam = AdamState::new([&w], cfg.learning_rate);
        let mut active: Vec<bool> = done.iter().map(|d| !d).collect();
        let mut step_success = vec![false; n];
        let mut prev_loss = vec![f32::INFINITY; n];

        for it in 0..cfg.max_iterations {
            if !active.iter().any(|&a| a) {
                break;
            }
            let t = w.map(f32::tanh);
            let xp = t.map(|v| (v + 1.0) * 0.5);
            let mut tape = Tape::new();
            let fv = model.forward_frozen(&mut tape, xp.clone())?;
            let logits = tape.value(fv.logits).clone();
            let mut coeffs = vec![0f32; n * k];
            let mut losses = vec![0f32; n];
            for i in 0..n {
                let row = logits.row(i);
                let (f, other) = cw_margin(row, y[i], cfg.confidence);
                let mut sq = 0f64;
                for (&a, &b) in xp.row(i).iter().zip(x.row(i)) {
                    sq += ((a - b) as f64).powi(2);
                }
                losses[i] = sq as f32 + c[i] * f;
                if !active[i] {
                    continue;
                }
                let mut shifted = row.to_vec();
                shifted[y[i]] += cfg.confidence;
                if argmax(&shifted) != y[i] {
                    step_success[i] = true;
                    let l2 = sq.sqrt() as f32;
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        best_x[i * width..(i + 1) * width].copy_from_slice(xp.row(i));
                    }
                }
                if row[y[i]] - row[other] > -cfg.confidence {
                    coeffs[i * k + y[i]] = c[i];
                    coeffs[i * k + other] = -c[i];
                }
            }
            let root = tape.dot_const(fv.logits, Tensor::new(vec![n, k], coeffs)?)?;
            let mut grads = tape.backward(root)?;
            let g_logit = grads.take(fv.input).expect("input reaches the margin");

            let mut gw = vec![0f32; n * width];
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                for j in i * width..(i + 1) * width {
                    let dxp = 2.0 * (xp.data()[j] - x.data()[j]) + g_logit.data()[j];
                    gw[j] = dxp * (1.0 - t.data()[j] * t.data()[j]) * 0.5;
                }
            }
            let before = w.clone();
            let gw = Tensor::new(w.shape().to_vec(), gw)?;
            adam.step(&mut [&mut w], &[&gw])?;
            // Frozen examples keep their parameters.
            for i in (0..n).filter(|&i| !active[i]) {
                w.row_mut(i).copy_from_slice(before.row(i));
            }

            if cfg.abort_early && it % check_every == 0 {
                for i in 0..n {
                    if active[i] {
                        if losses[i] > prev_loss[i] * 0.9999 {
                            active[i] = false;
                        }
                        prev_loss[i] = losses[i];
                    }
                }
            }
        }

        for i in (0..n).filter(|&i| !done[i]) {
            if step_success[i] {
                upper[i] = upper[i].min(c[i]);
                if upper[i] < 1e9 {
                    c[i] = (lower[i] + upper[i]) / 2.0;
                }
            } else {
                lower[i] = lower[i].max(c[i]);
                c[i] = if upper[i] < 1e9 {
                    (lower[i] + upper[i]) / 2.0
                } else {
                    (c[i] * 10.0).min(1e10)
                };
            }
        }
    }
    Ok(best_x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_and_is_idempotent() {
        let x = Tensor::new(vec![3], vec![0.5, 0.0, 1.0]).unwrap();
        let q = quantize(&x, 256).unwrap();
        assert_eq!(q.data()[0], 128.0 / 255.0);
        assert_eq!(quantize(&q, 256).unwrap(), q);
        assert!(quantize(&x, 1).is_err());
    }

    #[test]
    fn quantize_half_step_bound() {
        let vals: Vec<f32> = (0..=1000).map(|i| i as f32 / 1000.0).collect();
        let x = Tensor::new(vec![vals.len()], vals).unwrap();
        let q = quantize(&x, 256).unwrap();
        for (a, b) in x.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
    }

    #[test]
    fn ball_projection_is_exact() {
        let eps = 3.0 / 255.0;
        for i in 0..1000 {
            let o = i as f32 / 999.0;
            for v in [o + eps, o - eps, o + 2.0 * eps, o - 0.1] {
                let p = into_ball(v, o, eps);
                assert!((p - o).abs() <= eps);
            }
        }
    }

    #[test]
    fn success_rate_extremes() {
        assert_eq!(success_rate(&[true, true]), 1.0);
        assert_eq!(success_rate(&[false, false, false]), 0.0);
    }

    #[test]
    fn margin_picks_best_competitor() {
        let (f, o) = cw_margin(&[1.0, 3.0, 2.0], 1, 0.0);
        assert_eq!((f, o), (1.0, 2));
        let (f, _) = cw_margin(&[5.0, 0.0], 1, 0.5);
        assert_eq!(f, -0.5);
    }

    #[test]
    fn budget_validation() {
        let bad = AttackBudget {
            alpha: 0.1,
            epsilon: 0.05,
            ..AttackBudget::default()
        };
        assert!(bad.validate().is_err());
        assert!(AttackBudget::default().validate().is_ok());
    }
}
