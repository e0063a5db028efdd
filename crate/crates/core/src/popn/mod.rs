//! The POP-N score: how often a 1-nearest-neighbor classifier over clean
//! projections agrees with the attacked model's prediction for each
//! projected adversarial point.

mod kdtree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::NnIndex;

use crate::dimred::{project_with, Method, Mode, ProjectionConfig, ProjectionPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label of the nearest reference point (lowest index on ties).
pub fn nn1_classify(index: &NnIndex, query: &[f64]) -> Result<usize> {
    let (i, _) = index.nearest(query)?;
    Ok(index.labels()[i])
}

/// Fraction of adversarial points whose nearest clean neighbor (in `z`)
/// carries the label the attacked model predicted for them.
pub fn pop_score(z: &Tensor<f64>, y: &[usize], z_adv: &Tensor<f64>, y_adv: &[usize]) -> Result<f64> {
    let index = NnIndex::new(z.clone(), y.to_vec())?;
    pop_score_indexed(&index, z_adv, y_adv)
}

pub fn pop_score_indexed(index: &NnIndex, z_adv: &Tensor<f64>, y_adv: &[usize]) -> Result<f64> {
    if z_adv.rank() != 2 || z_adv.row_len() != index.width() {
        return Err(Error::Dimension(format!(
            "adversarial projections {:?} do not match reference width {}",
            z_adv.shape(),
            index.width()
        )));
    }
    if z_adv.rows() != y_adv.len() {
        return Err(Error::Dimension(format!(
            "{} adversarial projections but {} predictions",
            z_adv.rows(),
            y_adv.len()
        )));
    }
    let m = y_adv.len();
    if m == 0 {
        return Err(Error::Input("POP score needs at least one adversarial point".into()));
    }
    let hits = (0..m)
        .into_par_iter()
        .map(|i| nn1_classify(index, z_adv.row(i)).map(|l| usize::from(l == y_adv[i])))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopResult {
    pub scores: Vec<f64>,
    pub trials: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub sd: f64,
    pub single_trial: bool,
}

impl PopResult {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        let n = scores.len();
        if n == 0 {
            return Err(Error::Input("at least one trial is required".into()));
        }
        if scores.iter().all(|&s| s == scores[0]) {
            return Ok(PopResult { trials: n, mean: scores[0], sd: 0.0, single_trial: n == 1, scores });
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(PopResult { trials: n, mean, sd, single_trial: n == 1, scores })
    }
}

/// Everything one scoring run projects and compares.
#[derive(Debug, Clone, Copy)]
pub struct PopJob<'a> {
    pub method: Method,
    pub mode: Mode,
    pub r: &'a Tensor<f64>,
    pub r_adv: &'a Tensor<f64>,
    pub y: &'a [usize],
    pub y_adv: &'a [usize],
    pub dims: usize,
    pub config: &'a ProjectionConfig,
}

/// Runs `trials` projections with seeds `base_seed + t` and scores each.
pub fn pop_trials(job: &PopJob, trials: usize, base_seed: u64) -> Result<PopResult> {
    pop_trials_observed(job, trials, base_seed, |_, _| Ok(()))
}

/// As [`pop_trials`], handing each trial's projection to `observe` in trial
/// order.
pub fn pop_trials_observed(
    job: &PopJob,
    trials: usize,
    base_seed: u64,
    mut observe: impl FnMut(usize, &ProjectionPair) -> Result<()>,
) -> Result<PopResult> {
    if trials == 0 {
        return Err(Error::Input("trials must be at least 1".into()));
    }
    if job.r.rows() != job.y.len() {
        return Err(Error::Dimension(format!(
            "{} clean representations but {} labels",
            job.r.rows(),
            job.y.len()
        )));
    }
    let mut scores = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = base_seed.wrapping_add(t as u64);
        let pair = project_with(job.method, job.mode, job.r, job.r_adv, job.dims, seed, job.config)?;
        observe(t, &pair)?;
        scores.push(pop_score(&pair.z, job.y, &pair.z_adv, job.y_adv)?);
    }
    PopResult::from_scores(scores)
}
