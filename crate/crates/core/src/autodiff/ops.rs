//! Forward and backward kernels for the tape operations.
//!
//! Every kernel is a pure function of its inputs so that the tape can replay
//! them. Batch-parallel loops write disjoint output slices and reduce
//! per-sample partials in sample order, which keeps results independent of
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub(crate) fn affine_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.rows();
    let d_in = x.row_len();
    if w.rank() != 2 || w.shape()[0] != d_in || b.len() != w.shape()[1] {
        return Err(Error::Dimension(format!(
            "affine: input {:?} (width {d_in}), weights {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let d_out = w.shape()[1];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * d_out];
    for i in 0..n {
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for k in 0..d_in {
            let xik = xd[i * d_in + k];
            let wrow = &wd[k * d_out..(k + 1) * d_out];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o = *o + xik * wv;
            }
        }
        for (o, &bv) in orow.iter_mut().zip(bd) {
            *o = *o + bv;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Returns (dx, dW, db).
pub(crate) fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.rows();
    let d_in = x.row_len();
    let d_out = w.shape()[1];
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());
    let mut dx = vec![T::zero(); n * d_in];
    let mut dw = vec![T::zero(); d_in * d_out];
    let mut db = vec![T::zero(); d_out];
    for i in 0..n {
        let grow = &gd[i * d_out..(i + 1) * d_out];
        for k in 0..d_in {
            let wrow = &wd[k * d_out..(k + 1) * d_out];
            let mut acc = T::zero();
            for (&g, &wv) in grow.iter().zip(wrow) {
                acc = acc + g * wv;
            }
            dx[i * d_in + k] = acc;
            let xik = xd[i * d_in + k];
            for (dwv, &g) in dw[k * d_out..(k + 1) * d_out].iter_mut().zip(grow) {
                *dwv = *dwv + xik * g;
            }
        }
        for (dbv, &g) in db.iter_mut().zip(grow) {
            *dbv = *dbv + g;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dW shape"),
        Tensor::new(vec![d_out], db).expect("db shape"),
    )
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu grad shape")
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects rank-4 input and kernels, got {:?} and {:?}",
            x.shape(),
            k.shape()
        )));
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input {:?} has {c} channels, kernels {:?} expect {kc}",
            x.shape(),
            k.shape()
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        }),
        _ => Err(Error::Dimension(format!(
            "conv2d kernel {:?} does not fit input {:?} with pad {pad}, stride {stride}",
            k.shape(),
            x.shape()
        ))),
    }
}

/// Output positions `lo..hi` whose input index `o·stride + k − pad` lies in
/// `0..extent`.
#[inline]
fn valid_outputs(out_extent: usize, k: usize, stride: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if extent + pad <= k {
        return (lo, lo);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

/// Fills `patches` (`[oh·ow, C·kh·kw]`, zero padding) from one sample.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, patches: &mut [T]) {
    let q = g.c * g.kh * g.kw;
    for v in patches.iter_mut() {
        *v = T::zero();
    }
    for c in 0..g.c {
        let iplane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_outputs(g.oh, ky, g.stride, g.pad, g.h);
            for kx in 0..g.kw {
                let col = (c * g.kh + ky) * g.kw + kx;
                let (xlo, xhi) = valid_outputs(g.ow, kx, g.stride, g.pad, g.w);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        patches[(oy * g.ow + ox) * q + col] = iplane[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto the sample gradient.
fn col2im<T: Scalar>(dpatches: &[T], g: &ConvGeom, dx: &mut [T]) {
    let q = g.c * g.kh * g.kw;
    for c in 0..g.c {
        let dplane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_outputs(g.oh, ky, g.stride, g.pad, g.h);
            for kx in 0..g.kw {
                let col = (c * g.kh + ky) * g.kw + kx;
                let (xlo, xhi) = valid_outputs(g.ow, kx, g.stride, g.pad, g.w);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        let d = &mut dplane[iy * g.w + ix];
                        *d = *d + dpatches[(oy * g.ow + ox) * q + col];
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, k, stride, pad)?;
    let n = x.rows();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * g.oh * g.ow;
    let mut out = vec![T::zero(); n * out_sz];
    let kd = k.data();
    out.par_chunks_mut(out_sz.max(1))
        .zip(x.data().par_chunks(in_sz.max(1)))
        .for_each(|(o, xi)| conv_sample_forward(xi, kd, o, &g));
    Tensor::new(vec![n, g.f, g.oh, g.ow], out)
}

fn conv_sample_forward<T: Scalar>(x: &[T], k: &[T], out: &mut [T], g: &ConvGeom) {
    let q = g.c * g.kh * g.kw;
    let positions = g.oh * g.ow;
    let mut patches = vec![T::zero(); positions * q];
    im2col(x, g, &mut patches);
    for f in 0..g.f {
        let kf = &k[f * q..(f + 1) * q];
        let oplane = &mut out[f * positions..(f + 1) * positions];
        for (p, o) in oplane.iter_mut().enumerate() {
            *o = dot(kf, &patches[p * q..(p + 1) * q]);
        }
    }
}

/// Returns (dx, dkernels), each computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    (want_dx, want_dk): (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = conv_geom(x, k, stride, pad).expect("validated on forward");
    let n = x.rows();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * g.oh * g.ow;
    let kd = k.data();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(in_sz.max(1))
        .zip(dout.data().par_chunks(out_sz.max(1)))
        .map(|(xi, gi)| conv_sample_backward(xi, kd, gi, &g, want_dx, want_dk))
        .collect();
    let mut dx = Vec::with_capacity(if want_dx { n * in_sz } else { 0 });
    let mut dk = vec![T::zero(); if want_dk { kd.len() } else { 0 }];
    for (dxi, dki) in per_sample {
        dx.extend_from_slice(&dxi);
        for (a, b) in dk.iter_mut().zip(&dki) {
            *a = *a + *b;
        }
    }
    (
        want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("dx shape")),
        want_dk.then(|| Tensor::new(k.shape().to_vec(), dk).expect("dk shape")),
    )
}

fn conv_sample_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Vec<T>, Vec<T>) {
    let q = g.c * g.kh * g.kw;
    let positions = g.oh * g.ow;
    let mut dk = vec![T::zero(); if want_dk { k.len() } else { 0 }];
    if want_dk {
        let mut patches = vec![T::zero(); positions * q];
        im2col(x, g, &mut patches);
        for f in 0..g.f {
            let dkf = &mut dk[f * q..(f + 1) * q];
            for p in 0..positions {
                let gv = gout[f * positions + p];
                if gv != T::zero() {
                    axpy(gv, &patches[p * q..(p + 1) * q], dkf);
                }
            }
        }
    }
    let mut dx = vec![T::zero(); if want_dx { g.c * g.h * g.w } else { 0 }];
    if want_dx {
        let mut dpatches = vec![T::zero(); positions * q];
        for p in 0..positions {
            let drow = &mut dpatches[p * q..(p + 1) * q];
            for f in 0..g.f {
                let gv = gout[f * positions + p];
                if gv != T::zero() {
                    axpy(gv, &k[f * q..(f + 1) * q], drow);
                }
            }
        }
        col2im(&dpatches, g, &mut dx);
    }
    (dx, dk)
}

pub(crate) fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[2] == 0 || x.shape()[3] == 0 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [n,C,H,W] with H,W >= 1, got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let inv = T::one() / T::from_f64(plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let plane = x.shape()[2] * x.shape()[3];
    let inv = T::one() / T::from_f64(plane as f64);
    let mut dx = Vec::with_capacity(x.len());
    for &g in dout.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(x.shape().to_vec(), dx).expect("pool grad shape")
}

/// Returns (mean loss, softmax probabilities).
pub(crate) fn softmax_xent_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "cross-entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let n = labels.len();
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum_exp = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum_exp.ln();
        total = total + (lse - row[y]);
        probs.extend(row.iter().map(|&v| (v - max).exp() / sum_exp));
    }
    let loss = if n == 0 { T::zero() } else { total / T::from_f64(n as f64) };
    Ok((loss, Tensor::new(logits.shape().to_vec(), probs)?))
}

pub(crate) fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let n = labels.len();
    let k = probs.shape()[1];
    let scale = upstream / T::from_f64(n.max(1) as f64);
    let mut d = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        d[i * k + y] = d[i * k + y] - T::one();
    }
    for v in &mut d {
        *v = *v * scale;
    }
    Tensor::new(probs.shape().to_vec(), d).expect("xent grad shape")
}
