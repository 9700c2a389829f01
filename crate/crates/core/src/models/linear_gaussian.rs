use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{Dynamics, GaussianNoise, LinearObservation};

/// Scalar linear-Gaussian problem `X' = a X + omega`, `Y = X + epsilon`, with
/// the exact Kalman filter available as a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearGaussianConfig {
    pub a: f64,
    /// Variance of `omega`.
    pub model_var: f64,
    /// Variance of `epsilon`.
    pub obs_var: f64,
    pub steps: usize,
    /// Mean and variance of the initial distribution, shared by truth and filters.
    pub init_mean: f64,
    pub init_var: f64,
}

impl Default for LinearGaussianConfig {
    fn default() -> Self {
        Self {
            a: 0.9,
            model_var: 0.01,
            obs_var: 0.04,
            steps: 50,
            init_mean: 0.0,
            init_var: 0.1,
        }
    }
}

impl LinearGaussianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_var >= 0.0) {
            return Err(Error::config("experiment.linear_gaussian_oracle.model_var", "must be non-negative"));
        }
        if !(self.obs_var > 0.0) {
            return Err(Error::config("experiment.linear_gaussian_oracle.obs_var", "must be positive"));
        }
        if !(self.init_var >= 0.0) {
            return Err(Error::config("experiment.linear_gaussian_oracle.init_var", "must be non-negative"));
        }
        if !self.a.is_finite() || !self.init_mean.is_finite() {
            return Err(Error::config("experiment.linear_gaussian_oracle.a", "must be finite"));
        }
        if self.steps == 0 {
            return Err(Error::config("experiment.linear_gaussian_oracle.steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn true_params(&self) -> Vec<f64> {
        vec![self.a]
    }

    pub fn dynamics(&self) -> ScalarLinear {
        ScalarLinear {
            std: self.model_var.sqrt(),
        }
    }

    pub fn observation(&self) -> Result<LinearObservation> {
        LinearObservation::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            GaussianNoise::isotropic(1, self.obs_var.sqrt())?,
        )
    }

    /// Filtering means and variances for the observations `ys`.
    pub fn kalman(&self, ys: &[f64]) -> Vec<(f64, f64)> {
        kalman_filter(self.a, self.model_var, self.obs_var, self.init_mean, self.init_var, ys)
    }
}

/// `X' = a X + std xi`; the single parameter is `a`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLinear {
    pub std: f64,
}

impl Dynamics for ScalarLinear {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn step(&self, state: &[f64], params: &[f64], xi: &[f64], out: &mut [f64]) {
        out[0] = params[0] * state[0] + self.std * xi[0];
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.std * self.std)
    }
}

/// Scalar Kalman filter with predict-then-update at every observation.
pub fn kalman_filter(a: f64, q: f64, r: f64, m0: f64, p0: f64, ys: &[f64]) -> Vec<(f64, f64)> {
    let (mut m, mut p) = (m0, p0);
    ys.iter()
        .map(|&y| {
            m *= a;
            p = a * a * p + q;
            let gain = p / (p + r);
            m += gain * (y - m);
            p *= 1.0 - gain;
            (m, p)
        })
        .collect()
}
