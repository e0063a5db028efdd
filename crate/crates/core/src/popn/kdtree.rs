use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact 1-nearest-neighbor index over labeled reference points.
///
/// Queries return the Euclidean-nearest point; among equidistant points the
/// lowest reference index wins, exactly as a linear scan would.
pub struct NnIndex {
    points: Tensor<f64>,
    labels: Vec<usize>,
    order: Vec<usize>,
    root: Node,
}

impl NnIndex {
    pub fn new(points: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::Dimension(format!(
                "reference points must be [n, N], got {:?}",
                points.shape()
            )));
        }
        if points.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} reference points but {} labels",
                points.rows(),
                labels.len()
            )));
        }
        if points.rows() == 0 {
            return Err(Error::Input("nearest-neighbor index needs at least one point".into()));
        }
        if !points.all_finite() {
            return Err(Error::Input("reference points must be finite".into()));
        }
        let mut order: Vec<usize> = (0..points.rows()).collect();
        let root = build(&points, &mut order, 0);
        Ok(NnIndex { points, labels, order, root })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.points.row_len()
    }

    pub fn points(&self) -> &Tensor<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Index of the nearest reference point and its squared distance.
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if query.len() != self.width() {
            return Err(Error::Dimension(format!(
                "query has width {}, index has width {}",
                query.len(),
                self.width()
            )));
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(&self.root, query, &mut best);
        Ok((best.1, best.0))
    }

    fn search(&self, node: &Node, q: &[f64], best: &mut (f64, usize)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d: f64 = self
                        .points
                        .row(i)
                        .iter()
                        .zip(q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Ties may live on either side, so only a strictly farther
                // plane prunes.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(points: &Tensor<f64>, idx: &mut [usize], offset: usize) -> Node {
    let n = idx.len();
    if n <= LEAF_SIZE {
        return Node::Leaf { start: offset, end: offset + n };
    }
    let width = points.row_len();
    let axis = (0..width)
        .map(|a| {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = points.row(i)[a];
                (lo.min(v), hi.max(v))
            });
            (hi - lo, a)
        })
        .fold((f64::NEG_INFINITY, 0), |best, c| if c.0 > best.0 { c } else { best })
        .1;
    let mid = n / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| {
        points.row(a)[axis].total_cmp(&points.row(b)[axis]).then(a.cmp(&b))
    });
    let value = points.row(idx[mid])[axis];
    let (l, r) = idx.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l, offset)),
        right: Box::new(build(points, r, offset + mid)),
    }
}
