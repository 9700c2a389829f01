use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{CoordinateObservation, Dynamics, GaussianNoise, Transform};

/// Finite-difference Fokker-Planck equation on `[x_min, x_max]`, parameters
/// `(b, delta)`: drift and diffusion strength.
///
/// Grid point `i = 1..=d` sits at `x_min + i dx`; the values just outside the
/// grid are held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FokkerPlanckConfig {
    pub drift: f64,
    pub diffusion: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub dt: f64,
    pub steps: usize,
    /// Model noise coefficient; the default is `0.5 dt`.
    pub sigma: f64,
    pub obs_std: f64,
    /// Detector cut-off `lambda` in `max(x, lambda)`.
    pub cutoff: f64,
    /// Initial profile `amplitude * exp(-(x - center)^2)`.
    pub init_amplitude: f64,
    pub init_center: f64,
}

impl Default for FokkerPlanckConfig {
    fn default() -> Self {
        Self {
            drift: 10.0,
            diffusion: 2.0,
            x_min: 0.0,
            x_max: 30.0,
            dx: 0.25,
            dt: 0.01,
            steps: 100,
            sigma: 0.5 * 0.01,
            obs_std: 0.02,
            cutoff: 0.1,
            init_amplitude: 10.0,
            init_center: 10.0,
        }
    }
}

impl FokkerPlanckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) {
            return Err(Error::config("experiment.fokker_planck.dx", "must be positive"));
        }
        if !(self.x_max > self.x_min) {
            return Err(Error::config("experiment.fokker_planck.x_max", "must exceed x_min"));
        }
        if self.dim() < 3 {
            return Err(Error::config("experiment.fokker_planck.dx", "grid needs at least 3 points"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("experiment.fokker_planck.dt", "must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("experiment.fokker_planck.sigma", "must be non-negative"));
        }
        if !(self.obs_std > 0.0) {
            return Err(Error::config("experiment.fokker_planck.obs_std", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("experiment.fokker_planck.steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of grid points `(x_max - x_min) / dx`.
    pub fn dim(&self) -> usize {
        ((self.x_max - self.x_min) / self.dx).round() as usize
    }

    pub fn true_params(&self) -> Vec<f64> {
        vec![self.drift, self.diffusion]
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.dim()).map(|i| self.x_min + i as f64 * self.dx).collect()
    }

    pub fn initial_profile(&self) -> Vec<f64> {
        self.grid()
            .iter()
            .map(|x| self.init_amplitude * (-(x - self.init_center).powi(2)).exp())
            .collect()
    }

    /// `delta^2 dt / (2 dx^2)` at the true diffusion; explicit schemes need it
    /// below one half.
    pub fn diffusion_ratio(&self) -> f64 {
        self.diffusion * self.diffusion * self.dt / (2.0 * self.dx * self.dx)
    }

    pub fn dynamics(&self) -> FokkerPlanck {
        FokkerPlanck {
            d: self.dim(),
            dx: self.dx,
            dt: self.dt,
            sigma: self.sigma,
        }
    }

    pub fn observation(&self) -> Result<CoordinateObservation> {
        let d = self.dim();
        CoordinateObservation::new(
            d,
            (0..d).collect(),
            vec![Transform::Cutoff(self.cutoff); d],
            GaussianNoise::isotropic(d, self.obs_std)?,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FokkerPlanck {
    pub d: usize,
    pub dx: f64,
    pub dt: f64,
    pub sigma: f64,
}

/// One step of the scheme
/// `X_i' = X_i - b (X_{i+1} - X_i) dt/dx + delta^2/2 (X_{i+1} - 2 X_i + X_{i-1}) dt/dx^2 + sigma xi_i`
/// with zero values beyond both ends.
pub fn fp_step(state: &[f64], params: &[f64], dx: f64, dt: f64, sigma: f64, xi: &[f64], out: &mut [f64]) {
    let d = state.len();
    let (b, delta) = (params[0], params[1]);
    let adv = b * dt / dx;
    let dif = 0.5 * delta * delta * dt / (dx * dx);
    for i in 0..d {
        let left = if i == 0 { 0.0 } else { state[i - 1] };
        let right = if i + 1 == d { 0.0 } else { state[i + 1] };
        let x = state[i];
        out[i] = x - adv * (right - x) + dif * (right - 2.0 * x + left) + sigma * xi[i];
    }
}

impl Dynamics for FokkerPlanck {
    fn state_dim(&self) -> usize {
        self.d
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn step(&self, state: &[f64], params: &[f64], xi: &[f64], out: &mut [f64]) {
        fp_step(state, params, self.dx, self.dt, self.sigma, xi, out);
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * (self.sigma * self.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Observation;

    #[test]
    fn paper_grid() {
        let c = FokkerPlanckConfig::default();
        assert_eq!(c.dim(), 120);
        assert!((c.diffusion_ratio() - 0.32).abs() < 1e-12);
        let g = c.grid();
        assert_eq!(g[0], 0.25);
        assert_eq!(g[119], 30.0);
    }

    #[test]
    fn constant_profile_is_kept_in_the_interior() {
        let d = 10;
        let s = vec![3.0; d];
        let mut out = vec![0.0; d];
        for &(b, delta) in &[(10.0, 2.0), (0.5, 7.0), (-3.0, 0.1)] {
            fp_step(&s, &[b, delta], 0.25, 0.01, 0.0, &vec![0.0; d], &mut out);
            for i in 1..d - 1 {
                assert!((out[i] - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let s: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0; 8];
        fp_step(&s, &[0.0, 0.0], 0.25, 0.01, 0.0, &vec![0.0; 8], &mut out);
        assert_eq!(out, s);
    }

    #[test]
    fn linear_profile_is_advected() {
        let dx = 0.25;
        let dt = 0.01;
        let s: Vec<f64> = (1..=12).map(|i| i as f64 * dx).collect();
        let mut out = vec![0.0; 12];
        fp_step(&s, &[1.0, 0.0], dx, dt, 0.0, &vec![0.0; 12], &mut out);
        for i in 1..11 {
            assert!((out[i] - (s[i] - dt)).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_observation() {
        let c = FokkerPlanckConfig { x_max: 1.0, ..Default::default() };
        let obs = c.observation().unwrap();
        let mut y = vec![0.0; 4];
        obs.observe(&[0.05, 5.0, 0.1, -1.0], &mut y);
        assert_eq!(y, vec![0.1, 5.0, 0.1, 0.1]);
    }
}
