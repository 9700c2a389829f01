//! Dynamical and observation models.
//!
//! A problem instance is the pair of a [`Dynamics`] (the transition
//! `X' = f(X, params) + noise`) and an [`Observation`] (`Y = g(X) + noise`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, SimRng};

/// Zero-mean Gaussian noise with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    diagonal: bool,
}

impl GaussianNoise {
    /// Noise with a symmetric positive definite covariance.
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
            return Err(Error::Dimension("noise covariance must be square".into()));
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("noise covariance has non-finite entries".into()));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Domain("noise covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("noise covariance is not positive definite".into()))?;
        let precision = chol.inverse();
        let diagonal = (0..cov.nrows()).all(|i| (0..cov.ncols()).all(|j| i == j || cov[(i, j)] == 0.0));
        Ok(Self {
            chol: chol.l(),
            cov,
            precision,
            diagonal,
        })
    }

    /// Independent coordinates with the given standard deviations.
    pub fn diagonal(std: &[f64]) -> Result<Self> {
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("noise std must be positive, got {s}")));
        }
        let var: Vec<f64> = std.iter().map(|s| s * s).collect();
        let n = std.len();
        Self::new(DMatrix::from_diagonal(&DVector::from_vec(var))).map(|mut g| {
            // exact diagonal inverse rather than the factorised one
            g.precision = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / (std[i] * std[i]) } else { 0.0 });
            g
        })
    }

    /// Same standard deviation on every coordinate.
    pub fn isotropic(dim: usize, std: f64) -> Result<Self> {
        Self::diagonal(&vec![std; dim])
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Whether the covariance has no off-diagonal entries.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// Lower Cholesky factor `L` with `L L^T = cov`.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `L xi` for a vector of standard normal draws.
    pub fn color(&self, xi: &[f64], out: &mut [f64]) {
        let n = self.dim();
        if self.diagonal {
            for i in 0..n {
                out[i] = self.chol[(i, i)] * xi[i];
            }
            return;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += self.chol[(i, k)] * xi[k];
            }
            out[i] = acc;
        }
    }

    /// One draw.
    pub fn sample(&self, rng: &mut SimRng, out: &mut [f64]) {
        let mut xi = vec![0.0; self.dim()];
        fill_standard_normal(rng, &mut xi);
        self.color(&xi, out);
    }

    fn quad(&self, r: &[f64]) -> f64 {
        let n = self.dim();
        if self.diagonal {
            return (0..n).map(|i| self.precision[(i, i)] * r[i] * r[i]).sum();
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.precision[(i, j)] * r[j];
            }
            total += r[i] * acc;
        }
        total
    }

    pub(crate) fn apply_precision(&self, r: &[f64], out: &mut [f64]) {
        let n = self.dim();
        if self.diagonal {
            for i in 0..n {
                out[i] = self.precision[(i, i)] * r[i];
            }
            return;
        }
        for i in 0..n {
            out[i] = (0..n).map(|j| self.precision[(i, j)] * r[j]).sum();
        }
    }
}

/// Discrete-time stochastic transition `X' = f(X, params) + omega`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;

    fn param_dim(&self) -> usize;

    /// Number of standard normal draws consumed by one step.
    fn noise_dim(&self) -> usize {
        self.state_dim()
    }

    /// One transition. `xi` holds standard normal draws; the model maps them
    /// onto its own noise covariance. Passing zeros gives the deterministic map.
    fn step(&self, state: &[f64], params: &[f64], xi: &[f64], out: &mut [f64]);

    /// Covariance of the additive model noise.
    fn noise_cov(&self) -> DMatrix<f64>;
}

/// Observation operator `Y = g(X) + epsilon` with Gaussian `epsilon`.
pub trait Observation: Send + Sync {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn observe(&self, state: &[f64], out: &mut [f64]);

    /// Observation noise (`Sigma`).
    fn noise(&self) -> &GaussianNoise;

    /// `J(state)^T v` where `J` is the Jacobian of `observe`.
    fn jacobian_transpose_mul(&self, state: &[f64], v: &[f64], out: &mut [f64]);

    /// Diagonal of the Gauss-Newton curvature `J^T Sigma^-1 J`.
    fn gauss_newton_diag(&self, state: &[f64], out: &mut [f64]);

    /// `-1/2 (g(z) - y)^T Sigma^-1 (g(z) - y)`.
    fn log_likelihood(&self, z: &[f64], y: &[f64]) -> f64 {
        let mut r = vec![0.0; self.obs_dim()];
        self.observe(z, &mut r);
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri -= yi;
        }
        -0.5 * self.noise().quad(&r)
    }

    /// Gradient of [`Observation::log_likelihood`] in `z`.
    fn log_likelihood_grad(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.obs_dim();
        let mut r = vec![0.0; m];
        self.observe(z, &mut r);
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri = yi - *ri;
        }
        let mut pr = vec![0.0; m];
        self.noise().apply_precision(&r, &mut pr);
        self.jacobian_transpose_mul(z, &pr, out);
    }
}

/// Per-coordinate observation transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Arctan,
    /// `max(x, threshold)`; the derivative is taken as 0 at and below the threshold.
    Cutoff(f64),
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Arctan => x.atan(),
            Transform::Cutoff(lambda) => x.max(lambda),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Arctan => 1.0 / (1.0 + x * x),
            Transform::Cutoff(lambda) => {
                if x > lambda {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Observes selected state coordinates, each through its own [`Transform`].
#[derive(Debug, Clone)]
pub struct CoordinateObservation {
    state_dim: usize,
    indices: Vec<usize>,
    transforms: Vec<Transform>,
    noise: GaussianNoise,
}

impl CoordinateObservation {
    pub fn new(
        state_dim: usize,
        indices: Vec<usize>,
        transforms: Vec<Transform>,
        noise: GaussianNoise,
    ) -> Result<Self> {
        if indices.len() != transforms.len() || indices.len() != noise.dim() {
            return Err(Error::Dimension(format!(
                "{} indices, {} transforms, noise of dim {}",
                indices.len(),
                transforms.len(),
                noise.dim()
            )));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= state_dim) {
            return Err(Error::config(
                "observation.indices",
                format!("index {i} out of range for state dimension {state_dim}"),
            ));
        }
        Ok(Self {
            state_dim,
            indices,
            transforms,
            noise,
        })
    }

    /// Every coordinate observed directly with isotropic noise.
    pub fn identity(state_dim: usize, std: f64) -> Result<Self> {
        Self::new(
            state_dim,
            (0..state_dim).collect(),
            vec![Transform::Identity; state_dim],
            GaussianNoise::isotropic(state_dim, std)?,
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }
}

impl Observation for CoordinateObservation {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    fn observe(&self, state: &[f64], out: &mut [f64]) {
        for (k, (&i, tr)) in self.indices.iter().zip(&self.transforms).enumerate() {
            out[k] = tr.apply(state[i]);
        }
    }

    fn noise(&self) -> &GaussianNoise {
        &self.noise
    }

    fn jacobian_transpose_mul(&self, state: &[f64], v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, (&i, tr)) in self.indices.iter().zip(&self.transforms).enumerate() {
            out[i] += tr.derivative(state[i]) * v[k];
        }
    }

    fn gauss_newton_diag(&self, state: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let p = self.noise.precision();
        for (k, (&i, tr)) in self.indices.iter().zip(&self.transforms).enumerate() {
            let g = tr.derivative(state[i]);
            out[i] += g * g * p[(k, k)];
        }
    }

    fn log_likelihood_grad(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.obs_dim();
        let mut r = vec![0.0; m];
        for (k, (&i, tr)) in self.indices.iter().zip(&self.transforms).enumerate() {
            r[k] = y[k] - tr.apply(z[i]);
        }
        let mut pr = vec![0.0; m];
        self.noise.apply_precision(&r, &mut pr);
        self.jacobian_transpose_mul(z, &pr, out);
    }
}

/// One observation vector together with the operator that produced it.
#[derive(Clone)]
pub struct Measurement {
    pub operator: Arc<dyn Observation>,
    pub value: Vec<f64>,
}

impl Measurement {
    pub fn new(operator: Arc<dyn Observation>, value: Vec<f64>) -> Result<Self> {
        if value.len() != operator.obs_dim() {
            return Err(Error::Dimension(format!(
                "measurement of length {} for operator of dim {}",
                value.len(),
                operator.obs_dim()
            )));
        }
        Ok(Self { operator, value })
    }
}

impl std::fmt::Debug for Measurement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Measurement").field("value", &self.value).finish_non_exhaustive()
    }
}

/// Affine observation `g(x) = H x + c`.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    h: DMatrix<f64>,
    offset: DVector<f64>,
    noise: GaussianNoise,
}

impl LinearObservation {
    pub fn new(h: DMatrix<f64>, offset: DVector<f64>, noise: GaussianNoise) -> Result<Self> {
        if h.nrows() != offset.len() || h.nrows() != noise.dim() {
            return Err(Error::Dimension("H, offset and noise disagree on obs dim".into()));
        }
        Ok(Self { h, offset, noise })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }
}

impl Observation for LinearObservation {
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn observe(&self, state: &[f64], out: &mut [f64]) {
        for i in 0..self.h.nrows() {
            out[i] = self.offset[i] + (0..self.h.ncols()).map(|j| self.h[(i, j)] * state[j]).sum::<f64>();
        }
    }

    fn noise(&self) -> &GaussianNoise {
        &self.noise
    }

    fn jacobian_transpose_mul(&self, _state: &[f64], v: &[f64], out: &mut [f64]) {
        for j in 0..self.h.ncols() {
            out[j] = (0..self.h.nrows()).map(|i| self.h[(i, j)] * v[i]).sum();
        }
    }

    fn gauss_newton_diag(&self, _state: &[f64], out: &mut [f64]) {
        let ph = self.noise.precision() * &self.h;
        for j in 0..self.h.ncols() {
            out[j] = self.h.column(j).dot(&ph.column(j));
        }
    }
}

/// Sum of squares `r^T P r` with `P` the precision of `noise`.
pub fn mahalanobis_sq(noise: &GaussianNoise, r: &[f64]) -> f64 {
    noise.quad(r)
}
