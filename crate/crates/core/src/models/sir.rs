use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{CoordinateObservation, Dynamics};

/// Noisy discrete SIR epidemic model, parameters `(B, K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirConfig {
    /// Contact rate `B` of the truth.
    pub contact_rate: f64,
    /// Recovery rate `K` of the truth.
    pub recovery_rate: f64,
    pub dt: f64,
    /// Model noise coefficient; the default is `0.005 sqrt(dt)`.
    pub sigma: f64,
    /// Observation noise `delta`.
    pub obs_std: f64,
    pub steps: usize,
    /// `(S0, I0, R0)`.
    pub init: [f64; 3],
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            contact_rate: 0.5,
            recovery_rate: 2.0,
            dt: 0.2,
            sigma: 0.005 * 0.2f64.sqrt(),
            obs_std: 0.01,
            steps: 100,
            init: [1.0, 1e-6, 0.0],
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("experiment.sir.dt", "must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("experiment.sir.sigma", "must be non-negative"));
        }
        if !(self.obs_std > 0.0) {
            return Err(Error::config("experiment.sir.obs_std", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("experiment.sir.steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn true_params(&self) -> Vec<f64> {
        vec![self.contact_rate, self.recovery_rate]
    }

    pub fn dynamics(&self) -> Sir {
        Sir {
            dt: self.dt,
            sigma: self.sigma,
        }
    }

    pub fn observation(&self) -> Result<CoordinateObservation> {
        CoordinateObservation::identity(3, self.obs_std)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sir {
    pub dt: f64,
    pub sigma: f64,
}

/// One SIR transition with noise draws `xi`.
pub fn sir_step(state: &[f64], params: &[f64], dt: f64, sigma: f64, xi: &[f64], out: &mut [f64]) {
    let (s, i, r) = (state[0], state[1], state[2]);
    let (b, k) = (params[0], params[1]);
    let infection = b * s * i * dt;
    let recovery = k * i * dt;
    out[0] = s - infection + sigma * xi[0];
    out[1] = i + infection - recovery + sigma * xi[1];
    out[2] = r + recovery + sigma * xi[2];
}

impl Dynamics for Sir {
    fn state_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn step(&self, state: &[f64], params: &[f64], xi: &[f64], out: &mut [f64]) {
        sir_step(state, params, self.dt, self.sigma, xi, out);
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(3, 3) * (self.sigma * self.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_first_step() {
        let mut out = [0.0; 3];
        sir_step(&[1.0, 1e-6, 0.0], &[0.5, 2.0], 0.2, 0.0, &[0.0; 3], &mut out);
        assert!((out[0] - 0.9999999).abs() < 1e-15);
        assert!((out[1] - 7e-7).abs() < 1e-18);
        assert!((out[2] - 4e-7).abs() < 1e-18);
    }

    #[test]
    fn no_infection_is_stationary() {
        let mut out = [0.0; 3];
        sir_step(&[0.7, 0.0, 0.3], &[0.5, 2.0], 0.2, 0.0, &[0.0; 3], &mut out);
        assert_eq!(out, [0.7, 0.0, 0.3]);
        sir_step(&[0.7, 0.1, 0.2], &[0.0, 0.0], 0.2, 0.0, &[0.0; 3], &mut out);
        assert_eq!(out, [0.7, 0.1, 0.2]);
    }

    #[test]
    fn noise_enters_additively() {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        sir_step(&[0.9, 0.1, 0.0], &[0.5, 2.0], 0.2, 0.0, &[0.0; 3], &mut a);
        sir_step(&[0.9, 0.1, 0.0], &[0.5, 2.0], 0.2, 0.1, &[1.0, -2.0, 0.5], &mut b);
        assert!((b[0] - a[0] - 0.1).abs() < 1e-15);
        assert!((b[1] - a[1] + 0.2).abs() < 1e-15);
        assert!((b[2] - a[2] - 0.05).abs() < 1e-15);
    }
}
