//! Projections of penultimate representations to a few dimensions, and the
//! coupled versus out-of-sample orchestration used for scoring.

mod pca;
mod tsne;
mod umap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pca::{pca_fit, pca_transform, PcaModel};
pub use tsne::{
    tsne_affinities, tsne_conditional, tsne_embed, ConditionalAffinities, TsneConfig, TsneResult,
};
pub use umap::{
    fit_ab, umap_embed, umap_graph, umap_transform, SparseGraph, UmapConfig, UmapGraph, UmapModel,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Exact k nearest rows of `data` for every row of `queries`, as Euclidean
/// distances in ascending order with ties broken by index. With
/// `exclude_self`, query `i` is assumed to be data row `i` and skips itself.
pub(crate) fn exact_knn(
    data: &Tensor<f64>,
    queries: &Tensor<f64>,
    k: usize,
    exclude_self: bool,
) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let n = data.rows();
    queries
        .data()
        .par_chunks(queries.row_len().max(1))
        .take(queries.rows())
        .enumerate()
        .map(|(i, q)| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| !(exclude_self && j == i))
                .map(|j| (sq_dist(q, data.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            (
                cand.iter().map(|c| c.1).collect(),
                cand.iter().map(|c| c.0.sqrt()).collect(),
            )
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Tsne,
    Umap,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pca, Method::Tsne, Method::Umap];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Tsne => "tsne",
            Method::Umap => "umap",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Method::Pca),
            "tsne" | "t-sne" => Ok(Method::Tsne),
            "umap" => Ok(Method::Umap),
            _ => Err(Error::Usage(format!("unknown projection method '{s}' (pca, tsne, umap)"))),
        }
    }
}

/// Coupled: fit on clean and adversarial rows together. Oos: fit on clean
/// rows only, then transform both sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Coupled,
    Oos,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Coupled => "coupled",
            Mode::Oos => "oos",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coupled" => Ok(Mode::Coupled),
            "oos" => Ok(Mode::Oos),
            _ => Err(Error::Usage(format!("unknown projection mode '{s}' (coupled, oos)"))),
        }
    }
}

/// Hyperparameters for the nonlinear methods; the seed and output width are
/// supplied per call and override the ones stored here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub tsne: TsneConfig,
    pub umap: UmapConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub z: Tensor<f64>,
    pub z_adv: Tensor<f64>,
    pub method: Method,
    pub mode: Mode,
    pub seed: u64,
}

/// Projects clean representations `r` and adversarial `r_adv` to `dims`
/// dimensions with library defaults.
pub fn project(
    method: Method,
    mode: Mode,
    r: &Tensor<f64>,
    r_adv: &Tensor<f64>,
    dims: usize,
    seed: u64,
) -> Result<ProjectionPair> {
    project_with(method, mode, r, r_adv, dims, seed, &ProjectionConfig::default())
}

pub fn project_with(
    method: Method,
    mode: Mode,
    r: &Tensor<f64>,
    r_adv: &Tensor<f64>,
    dims: usize,
    seed: u64,
    cfg: &ProjectionConfig,
) -> Result<ProjectionPair> {
    if method == Method::Tsne && mode == Mode::Oos {
        return Err(Error::Unsupported(
            "t-SNE has no out-of-sample transform; use coupled mode".into(),
        ));
    }
    if r.rank() != 2 || r_adv.rank() != 2 || r.row_len() != r_adv.row_len() {
        return Err(Error::Dimension(format!(
            "clean {:?} and adversarial {:?} representations must be [n, D] with equal D",
            r.shape(),
            r_adv.shape()
        )));
    }
    let tsne_cfg = TsneConfig { dims, seed, ..cfg.tsne.clone() };
    let umap_cfg = UmapConfig { dims, seed, ..cfg.umap.clone() };
    let (z, z_adv) = match mode {
        Mode::Coupled => {
            let stacked = Tensor::vstack(r, r_adv)?;
            let joint = match method {
                Method::Pca => pca_transform(&pca_fit(&stacked, dims)?, &stacked)?,
                Method::Tsne => tsne_embed(&stacked, &tsne_cfg)?.embedding,
                Method::Umap => umap_embed(&stacked, &umap_cfg)?.0,
            };
            joint.split_rows(r.rows())
        }
        Mode::Oos => match method {
            Method::Pca => {
                let model = pca_fit(r, dims)?;
                (pca_transform(&model, r)?, pca_transform(&model, r_adv)?)
            }
            Method::Umap => {
                let (z, model) = umap_embed(r, &umap_cfg)?;
                (z, umap_transform(&model, r_adv)?)
            }
            Method::Tsne => unreachable!("rejected above"),
        },
    };
    Ok(ProjectionPair { z, z_adv, method, mode, seed })
}
