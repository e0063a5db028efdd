//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one record holding its inputs and forward value.
//! `backward` walks the records in reverse and returns a gradient for every
//! node, so the same pass yields parameter gradients (training) and input
//! gradients (attacks).

mod adam;
pub(crate) mod ops;

pub use adam::AdamState;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    GlobalAvgPool(Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Sum(Var),
    Scale(Var, T),
    DotConst(Var, Tensor<T>),
}

#[derive(Debug, Clone)]
struct Record<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    records: Vec<Record<T>>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.records[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Affine { x, w, b } => [x, w, b].iter().any(|v| self.requires_grad(**v)),
            Op::Conv2d { x, k, .. } => self.requires_grad(*x) || self.requires_grad(*k),
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::SoftmaxXent { logits: x, .. }
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::DotConst(x, _) => self.requires_grad(*x),
        };
        self.records.push(Record {
            op,
            value,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    /// A differentiable input (parameter or data) whose gradient `backward`
    /// reports.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// An input that receives no gradient; backward work for it is skipped.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    /// `x·W + b`, with `x` flattened to `[n, d_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::affine_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu_forward(self.value(x));
        self.push(Op::Relu(x), value)
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d_forward(self.value(x), self.value(kernels), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                k: kernels,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), value))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent_forward(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    /// Scalar `Σ x ⊙ coeffs` for a constant coefficient tensor.
    pub fn dot_const(&mut self, x: Var, coeffs: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != coeffs.shape() {
            return Err(Error::Dimension(format!(
                "dot_const: {:?} vs {:?}",
                xv.shape(),
                coeffs.shape()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(coeffs.data())
            .fold(T::zero(), |a, (&v, &c)| a + v * c);
        Ok(self.push(Op::DotConst(x, coeffs), Tensor::scalar(s)))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let Some(rec) = self.records.get(root.0) else {
            return Err(Error::Usage(format!(
                "root node {} is not on this tape ({} nodes)",
                root.0,
                self.records.len()
            )));
        };
        if rec.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                rec.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rec.value.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let rec = &self.records[idx];
            if !rec.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if self.records[v.0].requires_grad {
                    accumulate(&mut grads, v, t);
                }
            };
            match &rec.op {
                Op::Leaf | Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = ops::affine_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    acc(*x, dx);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let want = (self.requires_grad(*x), self.requires_grad(*k));
                    let (dx, dk) = ops::conv2d_backward(self.value(*x), self.value(*k), *stride, *pad, &g, want);
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dk) = dk {
                        acc(*k, dk);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(self.value(*x), &g);
                    acc(*x, dx);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let dx = ops::softmax_xent_backward(probs, labels, g.data()[0]);
                    acc(*logits, dx);
                }
                Op::Sum(x) => {
                    let dx = Tensor::full(self.value(*x).shape().to_vec(), g.data()[0]);
                    acc(*x, dx);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    acc(*x, g.map(|v| v * f));
                }
                Op::DotConst(x, coeffs) => {
                    let up = g.data()[0];
                    acc(*x, coeffs.map(|c| c * up));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every node from the leaf values, in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let v = match &rec.op {
                Op::Leaf | Op::Constant => rec.value.clone(),
                Op::Affine { x, w, b } => ops::affine_forward(&values[x.0], &values[w.0], &values[b.0])?,
                Op::Relu(x) => ops::relu_forward(&values[x.0]),
                Op::Conv2d { x, k, stride, pad } => ops::conv2d_forward(&values[x.0], &values[k.0], *stride, *pad)?,
                Op::GlobalAvgPool(x) => ops::global_avg_pool_forward(&values[x.0])?,
                Op::SoftmaxXent { logits, labels, .. } => {
                    Tensor::scalar(ops::softmax_xent_forward(&values[logits.0], labels)?.0)
                }
                Op::Sum(x) => Tensor::scalar(values[x.0].data().iter().fold(T::zero(), |a, &b| a + b)),
                Op::Scale(x, f) => {
                    let f = *f;
                    values[x.0].map(|v| v * f)
                }
                Op::DotConst(x, c) => Tensor::scalar(
                    values[x.0]
                        .data()
                        .iter()
                        .zip(c.data())
                        .fold(T::zero(), |a, (&v, &cv)| a + v * cv),
                ),
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_hand_product() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let w = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let w2 = t.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let b2 = t.leaf(Tensor::new(vec![1], vec![5.0]).unwrap());
        let z = t.affine(x, w2, b2).unwrap();
        assert_eq!(t.value(z).data(), &[16.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(vec![1, 3]));
        let w = t.leaf(Tensor::zeros(vec![2, 2]));
        let b = t.leaf(Tensor::zeros(vec![2]));
        let err = t.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let x2 = t.leaf(Tensor::new(vec![2], vec![-1.0, -2.0]).unwrap());
        let r2 = t.relu(x2);
        assert_eq!(t.value(r2).data(), &[0.0, 0.0]);

        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn conv_identity_kernel_and_box_sum() {
        let mut t = Tape::<f32>::new();
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = t.leaf(Tensor::new(vec![1, 1, 3, 3], data.clone()).unwrap());
        let k = t.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &data[..]);

        let x = t.leaf(Tensor::full(vec![1, 1, 5, 5], 1.0));
        let k = t.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 3, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = t.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(t.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_output_shape_grid() {
        for h in 3..9 {
            for kh in 1..=3 {
                for pad in 0..=2 {
                    for stride in 1..=3 {
                        let mut t = Tape::<f32>::new();
                        let x = t.leaf(Tensor::zeros(vec![1, 1, h, h + 1]));
                        let k = t.leaf(Tensor::zeros(vec![2, 1, kh, kh]));
                        let y = t.conv2d(x, k, stride, pad).unwrap();
                        let oh = (h + 2 * pad - kh) / stride + 1;
                        let ow = (h + 1 + 2 * pad - kh) / stride + 1;
                        assert_eq!(t.value(y).shape(), &[1, 2, oh, ow]);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_means_and_uniform_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let p = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(p).data(), &[2.5, 7.0]);
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let mut t = Tape::<f32>::new();
        let z = t.leaf(Tensor::zeros(vec![1, 10]));
        let l = t.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((t.value(l).data()[0] - 10f32.ln()).abs() < 1e-6);

        let z = t.leaf(Tensor::from_rows(&[vec![100.0, 0.0, 0.0]]));
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(t.value(l).data()[0] < 1e-6);

        assert!(matches!(t.softmax_cross_entropy(z, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn linear_gradient_is_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let s3 = t.scale(x, 3.0);
        let l = t.sum(s3);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn backward_rejects_foreign_or_vector_root() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(t.backward(Var(7)), Err(Error::Usage(_))));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }
}
