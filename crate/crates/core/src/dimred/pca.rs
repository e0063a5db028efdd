use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A fitted principal component basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[D, d]`, orthonormal columns.
    pub components: Tensor<f64>,
    /// Variances along each component (n − 1 denominator), nonincreasing.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_width(&self) -> usize {
        self.mean.len()
    }

    pub fn output_width(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Column `j` of the component matrix.
    pub fn component(&self, j: usize) -> Vec<f64> {
        let d = self.output_width();
        (0..self.input_width())
            .map(|r| self.components.data()[r * d + j])
            .collect()
    }
}

/// Exact PCA through the SVD of the mean-centered data.
///
/// Each component is sign-normalized so its largest-magnitude entry is
/// positive, which makes the fit independent of any seed.
pub fn pca_fit(x: &Tensor<f64>, d: usize) -> Result<PcaModel> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("PCA expects [n, D], got {:?}", x.shape())));
    }
    let (n, dim) = (x.rows(), x.row_len());
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d == 0 || d > (n - 1).min(dim) {
        return Err(Error::Input(format!(
            "cannot keep {d} components from {n} x {dim} data (max {})",
            (n - 1).min(dim)
        )));
    }
    let mut mean = vec![0f64; dim];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| x.row(i)[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut comps = vec![0f64; dim * d];
    let mut eigenvalues = Vec::with_capacity(d);
    for (j, &src) in order.iter().take(d).enumerate() {
        let row: Vec<f64> = (0..dim).map(|c| v_t[(src, c)]).collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > row[best].abs() { i } else { best });
        let flip = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in row.iter().enumerate() {
            comps[r * d + j] = flip * v;
        }
        let s = svd.singular_values[src];
        eigenvalues.push(s * s / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        components: Tensor::new(vec![dim, d], comps)?,
        eigenvalues,
    })
}

/// `(x − mean) · components`.
pub fn pca_transform(model: &PcaModel, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let dim = model.input_width();
    if x.rank() != 2 || x.row_len() != dim {
        return Err(Error::Dimension(format!(
            "PCA model expects width {dim}, got {:?}",
            x.shape()
        )));
    }
    let d = model.output_width();
    let c = model.components.data();
    let mut out = vec![0f64; x.rows() * d];
    for i in 0..x.rows() {
        let orow = &mut out[i * d..(i + 1) * d];
        for (r, (&v, &m)) in x.row(i).iter().zip(&model.mean).enumerate() {
            let centered = v - m;
            for (o, &cv) in orow.iter_mut().zip(&c[r * d..(r + 1) * d]) {
                *o += centered * cv;
            }
        }
    }
    Tensor::new(vec![x.rows(), d], out)
}
