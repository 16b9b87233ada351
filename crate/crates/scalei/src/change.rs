//! Detecting which environments change the score seen along a direction.
//!
//! For a direction `u = T h` inside the observation image, the pairing
//! `uᵀ(s_X(x) − s_X^m(x))` equals `hᵀ(s_Z(z) − s_Z^m(z))`, and the latent
//! difference is supported on the closed parent set of the node intervened
//! in environment `m`. A direction therefore "sees" environment `m` exactly
//! when the support of `h` meets that closed parent set. This module turns
//! sampled pairings into the binary change matrix recording those hits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::scm::EnvironmentSet;
use crate::score::ScoreOracle;
use crate::stats;
use crate::{Error, Result};

/// How sampled pairings are declared "identically zero".
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceConfig {
    /// Relative threshold on the high quantile of `|value|`.
    pub tol: f64,
    /// Quantile used so a few outliers cannot flip the decision.
    pub quantile: f64,
    /// Minimum number of sampled values required to decide.
    pub min_samples: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            tol: 1e-6,
            quantile: 0.99,
            min_samples: 1000,
        }
    }
}

/// Are the sampled values equal to zero almost everywhere, relative to
/// `scale`? A non-positive scale falls back to an absolute comparison.
pub fn as_equal(values: &[f64], scale: f64, cfg: &EquivalenceConfig) -> Result<bool> {
    if values.len() < cfg.min_samples {
        return Err(Error::Domain(format!(
            "equality test needs at least {} samples, got {}",
            cfg.min_samples,
            values.len()
        )));
    }
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let q = stats::quantile(&abs, cfg.quantile).expect("nonempty by the check above");
    let denom = if scale > f64::MIN_POSITIVE { scale } else { 1.0 };
    Ok(q / denom <= cfg.tol)
}

/// Binary matrix with one row per tested direction and one column per
/// interventional environment; a `1` means the environment changed the
/// score seen along that direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeMatrix {
    entries: DMatrix<u8>,
}

impl ChangeMatrix {
    pub fn from_entries(entries: DMatrix<u8>) -> ChangeMatrix {
        ChangeMatrix { entries }
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of interventional environments (columns).
    pub fn env_count(&self) -> usize {
        self.entries.ncols()
    }

    /// Entry for direction `row` and environment `m ∈ 1..=env_count`.
    pub fn hits(&self, row: usize, m: usize) -> bool {
        self.entries[(row, m - 1)] == 1
    }

    /// Number of ones in the matrix.
    pub fn l0(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 1).count()
    }

    pub fn row_weight(&self, row: usize) -> usize {
        (1..=self.env_count()).filter(|&m| self.hits(row, m)).count()
    }

    pub fn entries(&self) -> &DMatrix<u8> {
        &self.entries
    }

    /// Environments hit by `row`, as 1-based environment indices.
    pub fn row_support(&self, row: usize) -> Vec<usize> {
        (1..=self.env_count()).filter(|&m| self.hits(row, m)).collect()
    }
}

/// Pairings of each direction with each environment's score differences,
/// evaluated on observed samples `x` (rows). Directions are the columns of
/// `directions` and must lie in the observation image for the pairing to be
/// meaningful.
pub fn observed_change_matrix(
    oracle: &ScoreOracle,
    x: &DMatrix<f64>,
    directions: &DMatrix<f64>,
    cfg: &EquivalenceConfig,
) -> Result<ChangeMatrix> {
    if directions.nrows() != oracle.observed_dim() {
        return Err(Error::Shape(format!(
            "directions have {} coordinates, observations have {}",
            directions.nrows(),
            oracle.observed_dim()
        )));
    }
    let n_envs = oracle.env_count() - 1;
    let mut diffs = Vec::with_capacity(n_envs);
    for m in 1..=n_envs {
        diffs.push(oracle.score_difference_batch(m, x)?);
    }
    change_matrix_from_differences(&diffs, directions, cfg)
}

/// The pairing of [`observed_change_matrix`], applied to already-computed
/// score difference batches: `diffs[m-1]` holds environment `m`'s per-sample
/// difference rows.
pub fn change_matrix_from_differences(
    diffs: &[DMatrix<f64>],
    directions: &DMatrix<f64>,
    cfg: &EquivalenceConfig,
) -> Result<ChangeMatrix> {
    let r = directions.ncols();
    let mut entries = DMatrix::zeros(r, diffs.len());
    for (col, d) in diffs.iter().enumerate() {
        if d.ncols() != directions.nrows() {
            return Err(Error::Shape(format!(
                "difference rows have {} coordinates, directions have {}",
                d.ncols(),
                directions.nrows()
            )));
        }
        let med = median_row_norm(d);
        for i in 0..r {
            let u = directions.column(i);
            let values: Vec<f64> = (0..d.nrows()).map(|t| d.row(t).transpose().dot(&u)).collect();
            let scale = u.norm() * med;
            entries[(i, col)] = if as_equal(&values, scale, cfg)? { 0 } else { 1 };
        }
    }
    Ok(ChangeMatrix { entries })
}

/// Same pairing computed in latent coordinates: directions are columns of an
/// `n × r` matrix paired against latent score differences at latent points
/// `z` (rows).
pub fn latent_change_matrix(
    oracle: &ScoreOracle,
    z: &DMatrix<f64>,
    directions: &DMatrix<f64>,
    cfg: &EquivalenceConfig,
) -> Result<ChangeMatrix> {
    if directions.nrows() != oracle.latent_dim() {
        return Err(Error::Shape(format!(
            "directions have {} coordinates, latents have {}",
            directions.nrows(),
            oracle.latent_dim()
        )));
    }
    let r = directions.ncols();
    let n_envs = oracle.env_count() - 1;
    let mut entries = DMatrix::zeros(r, n_envs);
    for m in 1..=n_envs {
        let diffs = oracle.latent_difference_batch(m, z)?;
        let med = median_row_norm(&diffs);
        for i in 0..r {
            let h = directions.column(i);
            let values: Vec<f64> = (0..diffs.nrows())
                .map(|t| diffs.row(t).transpose().dot(&h))
                .collect();
            let scale = h.norm() * med;
            entries[(i, m - 1)] = if as_equal(&values, scale, cfg)? { 0 } else { 1 };
        }
    }
    Ok(ChangeMatrix { entries })
}

fn median_row_norm(diffs: &DMatrix<f64>) -> f64 {
    let norms: Vec<f64> = (0..diffs.nrows()).map(|t| diffs.row(t).norm()).collect();
    stats::quantile(&norms, 0.5).unwrap_or(0.0)
}

/// Ground-truth change pattern for latent coordinate directions: entry
/// `(i, m)` is set exactly when node `i` lies in the closed parent set of
/// environment `m`'s target.
pub fn expected_pattern(envs: &EnvironmentSet) -> ChangeMatrix {
    let n = envs.n();
    let mut entries = DMatrix::zeros(n, n);
    for m in 1..=n {
        for j in envs.dag().pa_bar(envs.target(m)) {
            entries[(j, m - 1)] = 1;
        }
    }
    ChangeMatrix { entries }
}
