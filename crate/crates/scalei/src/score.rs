//! Score access for mixed observations.
//!
//! Observations live on the image of the mixing map, an `n`-dimensional
//! subspace of `ℝ^d`. The observed score at a point `x = T z` is the
//! pushforward `s_X(x) = (T⁺)ᵀ s_Z(T⁺ x)`: pairing it with a direction
//! `u = T h` inside the image recovers the directional derivative of the
//! latent log density along `h`. Points off the image have no density and
//! are rejected.

use nalgebra::{DMatrix, DVector};

use crate::scm::{EnvironmentSet, MixingMap};
use crate::{Error, Result};

/// Relative distance from the image of the mixing map beyond which a query
/// point is rejected.
pub const MANIFOLD_TOL: f64 = 1e-8;

/// Exact score evaluations for every environment of a mixed model.
#[derive(Debug, Clone)]
pub struct ScoreOracle {
    envs: EnvironmentSet,
    mixing: MixingMap,
    pinv: DMatrix<f64>,
    pinv_t: DMatrix<f64>,
}

impl ScoreOracle {
    pub fn new(envs: EnvironmentSet, mixing: MixingMap) -> Result<ScoreOracle> {
        if mixing.latent_dim() != envs.n() {
            return Err(Error::Shape(format!(
                "mixing map has {} latent columns, model has {} nodes",
                mixing.latent_dim(),
                envs.n()
            )));
        }
        let pinv = mixing.pseudo_inverse()?;
        let pinv_t = pinv.transpose();
        Ok(ScoreOracle {
            envs,
            mixing,
            pinv,
            pinv_t,
        })
    }

    #[inline]
    pub fn environments(&self) -> &EnvironmentSet {
        &self.envs
    }

    #[inline]
    pub fn mixing(&self) -> &MixingMap {
        &self.mixing
    }

    /// Number of environments, `n + 1`.
    pub fn env_count(&self) -> usize {
        self.envs.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.envs.n()
    }

    pub fn observed_dim(&self) -> usize {
        self.mixing.observed_dim()
    }

    /// `T⁺`, mapping observations back to latent coordinates.
    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// Latent score of environment `m` at `z`.
    pub fn latent_score(&self, m: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_env(m)?;
        self.envs.env(m).latent_score(z)
    }

    /// Latent log density of environment `m` at `z`.
    pub fn latent_log_density(&self, m: usize, z: &DVector<f64>) -> Result<f64> {
        self.check_env(m)?;
        self.envs.env(m).latent_log_density(z)
    }

    /// Observed score of environment `m` at `x`, which must lie on the image
    /// of the mixing map up to [`MANIFOLD_TOL`].
    pub fn observed_score(&self, m: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_env(m)?;
        let z = self.project(x)?;
        Ok(&self.pinv_t * self.envs.env(m).latent_score(&z)?)
    }

    /// Observed scores for every row of `x`, one score per output row.
    pub fn score_batch(&self, m: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_env(m)?;
        let k = x.nrows();
        let mut out = DMatrix::zeros(k, self.observed_dim());
        let mut xt = DVector::zeros(self.observed_dim());
        for t in 0..k {
            for j in 0..self.observed_dim() {
                xt[j] = x[(t, j)];
            }
            let s = self.observed_score(m, &xt)?;
            out.row_mut(t).copy_from_slice(s.as_slice());
        }
        Ok(out)
    }

    /// Rows of `s_X(x_t) − s_X^m(x_t)` over the rows of `x`. The row space
    /// of this matrix estimates the span of the score changes produced by
    /// intervention `m`.
    pub fn score_difference_batch(&self, m: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m == 0 || m >= self.env_count() {
            return Err(Error::Domain(format!(
                "score differences need an interventional environment, got {m}"
            )));
        }
        let k = x.nrows();
        let mut out = DMatrix::zeros(k, self.observed_dim());
        let mut xt = DVector::zeros(self.observed_dim());
        for t in 0..k {
            for j in 0..self.observed_dim() {
                xt[j] = x[(t, j)];
            }
            let z = self.project(&xt)?;
            let delta =
                self.envs.env(0).latent_score(&z)? - self.envs.env(m).latent_score(&z)?;
            let row = &self.pinv_t * delta;
            out.row_mut(t).copy_from_slice(row.as_slice());
        }
        Ok(out)
    }

    /// Latent score differences `s_Z(z_t) − s_Z^m(z_t)` per row, used when
    /// the ground-truth latents are available.
    pub fn latent_difference_batch(&self, m: usize, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m == 0 || m >= self.env_count() {
            return Err(Error::Domain(format!(
                "score differences need an interventional environment, got {m}"
            )));
        }
        let k = z.nrows();
        let n = self.latent_dim();
        let mut out = DMatrix::zeros(k, n);
        let mut zt = DVector::zeros(n);
        for t in 0..k {
            for j in 0..n {
                zt[j] = z[(t, j)];
            }
            let delta = self.envs.env(0).latent_score(&zt)? - self.envs.env(m).latent_score(&zt)?;
            out.row_mut(t).copy_from_slice(delta.as_slice());
        }
        Ok(out)
    }

    /// Latent point `T⁺ x` after verifying `x` lies on the image of `T`.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.observed_dim() {
            return Err(Error::Shape(format!(
                "query has {} coordinates, observations have {}",
                x.len(),
                self.observed_dim()
            )));
        }
        let z = &self.pinv * x;
        let back = self.mixing.matrix() * &z;
        let err = (&back - x).norm();
        if err > MANIFOLD_TOL * x.norm().max(1.0) {
            return Err(Error::Domain(format!(
                "point is off the observation manifold (distance {err:.3e})"
            )));
        }
        Ok(z)
    }

    fn check_env(&self, m: usize) -> Result<()> {
        if m >= self.env_count() {
            return Err(Error::Domain(format!(
                "environment {m} out of range 0..{}",
                self.env_count()
            )));
        }
        Ok(())
    }
}
