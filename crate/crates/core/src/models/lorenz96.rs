use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::system::{CoordinateObservation, Dynamics, GaussianNoise, Transform};

/// Euler-discretised Lorenz-96 system with parameters `(lambda, gamma, F)`:
/// `X_i' = X_i + [lambda (X_{i+1} - X_{i-2}) X_{i-1} - gamma X_i + F] dt + sigma xi_i`,
/// indices cyclic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lorenz96Config {
    pub lambda: f64,
    pub gamma: f64,
    pub forcing: f64,
    pub dim: usize,
    pub dt: f64,
    pub steps: usize,
    /// Model noise coefficient; the default is `0.1 sqrt(dt)`.
    pub sigma: f64,
    /// Coordinates observed at each time, re-drawn every step.
    pub n_obs: usize,
    /// Observed coordinates seen through `arctan`, a subset of the observed ones.
    pub n_arctan: usize,
    pub obs_std: f64,
    /// Standard deviation of the truth's initial offset from `F / gamma`.
    pub init_perturbation: f64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            gamma: 5.0,
            forcing: 8.0,
            dim: 200,
            dt: 0.02,
            steps: 50,
            sigma: 0.1 * 0.02f64.sqrt(),
            n_obs: 100,
            n_arctan: 10,
            obs_std: 0.05,
            init_perturbation: 1.0,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::config("experiment.lorenz96.dim", "cyclic indexing needs dim >= 4"));
        }
        if self.n_obs == 0 || self.n_obs > self.dim {
            return Err(Error::config("experiment.lorenz96.n_obs", "must lie in 1..=dim"));
        }
        if self.n_arctan > self.n_obs {
            return Err(Error::config("experiment.lorenz96.n_arctan", "must not exceed n_obs"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("experiment.lorenz96.dt", "must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("experiment.lorenz96.sigma", "must be non-negative"));
        }
        if !(self.obs_std > 0.0) {
            return Err(Error::config("experiment.lorenz96.obs_std", "must be positive"));
        }
        if !(self.init_perturbation >= 0.0) {
            return Err(Error::config("experiment.lorenz96.init_perturbation", "must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("experiment.lorenz96.steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn true_params(&self) -> Vec<f64> {
        vec![self.lambda, self.gamma, self.forcing]
    }

    pub fn dynamics(&self) -> Lorenz96 {
        Lorenz96 {
            d: self.dim,
            dt: self.dt,
            sigma: self.sigma,
        }
    }

    /// Draws the observed coordinates and their `arctan` subset, both sorted.
    pub fn draw_mask(&self, rng: &mut SimRng) -> ObservationMask {
        let mut observed = index::sample(rng, self.dim, self.n_obs).into_vec();
        observed.sort_unstable();
        let mut picks = index::sample(rng, self.n_obs, self.n_arctan).into_vec();
        picks.sort_unstable();
        let arctan = picks.iter().map(|&k| observed[k]).collect();
        ObservationMask { observed, arctan }
    }

    pub fn observation(&self, mask: &ObservationMask) -> Result<CoordinateObservation> {
        lorenz96_observation(self.dim, mask, self.obs_std)
    }
}

/// Observed coordinates at one time; `arctan` lists those seen through `arctan`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    pub observed: Vec<usize>,
    pub arctan: Vec<usize>,
}

/// `y_k = arctan(x_i)` for `i` in the arctan set, `x_i` otherwise, over the
/// observed coordinates in order.
pub fn lorenz96_observation(dim: usize, mask: &ObservationMask, obs_std: f64) -> Result<CoordinateObservation> {
    if let Some(&i) = mask.arctan.iter().find(|i| !mask.observed.contains(i)) {
        return Err(Error::config(
            "experiment.lorenz96.mask",
            format!("arctan coordinate {i} is not observed"),
        ));
    }
    let transforms = mask
        .observed
        .iter()
        .map(|i| if mask.arctan.contains(i) { Transform::Arctan } else { Transform::Identity })
        .collect();
    let m = mask.observed.len();
    CoordinateObservation::new(dim, mask.observed.clone(), transforms, GaussianNoise::isotropic(m, obs_std)?)
}

/// Cyclic neighbours `(i - 2, i - 1, i + 1)` of `i` on `0..d`.
#[inline]
pub fn neighbors(i: usize, d: usize) -> (usize, usize, usize) {
    ((i + d - 2) % d, (i + d - 1) % d, (i + 1) % d)
}

pub fn lorenz96_step(state: &[f64], params: &[f64], dt: f64, sigma: f64, xi: &[f64], out: &mut [f64]) {
    let d = state.len();
    let (lambda, gamma, forcing) = (params[0], params[1], params[2]);
    for i in 0..d {
        let (m2, m1, p1) = neighbors(i, d);
        let x = state[i];
        let tendency = lambda * (state[p1] - state[m2]) * state[m1] - gamma * x + forcing;
        out[i] = x + tendency * dt + sigma * xi[i];
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lorenz96 {
    pub d: usize,
    pub dt: f64,
    pub sigma: f64,
}

impl Dynamics for Lorenz96 {
    fn state_dim(&self) -> usize {
        self.d
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn step(&self, state: &[f64], params: &[f64], xi: &[f64], out: &mut [f64]) {
        lorenz96_step(state, params, self.dt, self.sigma, xi, out);
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * (self.sigma * self.sigma)
    }
}
