//! Direct particle filter over model parameters.
//!
//! Parameters follow the pseudo process `gamma' = gamma + xi`, `xi ~ N(0, Gamma)`.
//! A particle is weighted by how well a one-step prediction from the previous
//! state estimate under that particle agrees with the current state estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, SimRng};
use crate::system::{mahalanobis_sq, Dynamics, GaussianNoise};

/// `K` weighted particles in an `l`-dimensional parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterCloud {
    // l x K, one particle per column
    particles: DMatrix<f64>,
    weights: Vec<f64>,
}

impl ParameterCloud {
    /// Equally weighted cloud from an `l x K` matrix.
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() == 0 || particles.ncols() == 0 {
            return Err(Error::Dimension("parameter cloud needs l >= 1 and K >= 1".into()));
        }
        if let Some(pos) = particles.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameter in particle {}",
                pos / particles.nrows()
            )));
        }
        let k = particles.ncols();
        Ok(Self {
            particles,
            weights: vec![1.0 / k as f64; k],
        })
    }

    pub fn from_particles(particles: &[Vec<f64>]) -> Result<Self> {
        let l = particles.first().map_or(0, |p| p.len());
        if particles.iter().any(|p| p.len() != l) {
            return Err(Error::Dimension("particles differ in length".into()));
        }
        let flat: Vec<f64> = particles.iter().flatten().copied().collect();
        Self::new(DMatrix::from_column_slice(l, particles.len(), &flat))
    }

    /// `count` copies of one parameter vector.
    pub fn point(gamma: &[f64], count: usize) -> Result<Self> {
        let flat: Vec<f64> = (0..count).flat_map(|_| gamma.iter().copied()).collect();
        Self::new(DMatrix::from_column_slice(gamma.len(), count, &flat))
    }

    /// Independent Gaussian draws around `center` with per-coordinate `std`.
    pub fn gaussian(center: &[f64], std: &[f64], count: usize, rng: &mut SimRng) -> Result<Self> {
        if center.len() != std.len() {
            return Err(Error::Dimension("center and std differ in length".into()));
        }
        let l = center.len();
        let mut m = DMatrix::zeros(l, count);
        fill_standard_normal(rng, m.as_mut_slice());
        for mut col in m.column_iter_mut() {
            for i in 0..l {
                col[i] = center[i] + std[i] * col[i];
            }
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn count(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn particle(&self, k: usize) -> &[f64] {
        let l = self.dim();
        &self.particles.as_slice()[k * l..(k + 1) * l]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replaces the weights; they must be a point of the simplex.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, self.count())?;
        self.weights = weights;
        Ok(self)
    }

    /// Arithmetic mean of the particles. Accumulated relative to the first
    /// particle, so a cloud of identical particles returns that particle
    /// exactly.
    pub fn estimate(&self) -> DVector<f64> {
        let first = self.particles.column(0).into_owned();
        let k = self.count() as f64;
        let mut acc = DVector::zeros(self.dim());
        for col in self.particles.column_iter() {
            acc += col - &first;
        }
        first + acc / k
    }

    /// `sum_k w_k gamma_k`.
    pub fn weighted_mean(&self) -> DVector<f64> {
        &self.particles * DVector::from_column_slice(&self.weights)
    }
}

fn check_simplex(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::Dimension(format!("{} weights for {k} particles", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Exploration noise `N(0, Gamma)`, optionally annealed geometrically.
#[derive(Debug, Clone)]
pub struct ExplorationNoise {
    cov: DMatrix<f64>,
    // any F with F F^T = Gamma
    factor: DMatrix<f64>,
    decay: f64,
}

impl ExplorationNoise {
    /// `cov` symmetric positive semi-definite, `decay` in `(0, 1]`.
    pub fn new(cov: DMatrix<f64>, decay: f64) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
            return Err(Error::Dimension("exploration covariance must be square".into()));
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("exploration covariance has non-finite entries".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Domain("exploration covariance is not symmetric".into()));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Domain(format!("decay must lie in (0, 1], got {decay}")));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let tol = 1e-12 * cov.amax().max(f64::MIN_POSITIVE);
        if eig.eigenvalues.iter().any(|&v| v < -tol) {
            return Err(Error::Domain("exploration covariance is not positive semi-definite".into()));
        }
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(Self { cov, factor, decay })
    }

    /// Independent coordinates with standard deviations `std`.
    pub fn diagonal(std: &[f64], decay: f64) -> Result<Self> {
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Domain("exploration std must be non-negative".into()));
        }
        let var = DVector::from_iterator(std.len(), std.iter().map(|s| s * s));
        let mut noise = Self::new(DMatrix::from_diagonal(&var), decay)?;
        noise.factor = DMatrix::from_diagonal(&DVector::from_column_slice(std));
        Ok(noise)
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            cov: DMatrix::zeros(dim, dim),
            factor: DMatrix::zeros(dim, dim),
            decay: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn is_zero(&self) -> bool {
        self.cov.iter().all(|v| *v == 0.0)
    }

    /// The noise after `steps` annealing steps: `decay^steps Gamma`.
    pub fn decayed(&self, steps: usize) -> Self {
        let s = self.decay.powi(steps as i32);
        Self {
            cov: &self.cov * s,
            factor: &self.factor * s.sqrt(),
            decay: self.decay,
        }
    }

    /// One draw `F xi` into `out`.
    pub fn sample_into(&self, rng: &mut SimRng, out: &mut [f64]) {
        let l = self.dim();
        let mut xi = vec![0.0; l];
        fill_standard_normal(rng, &mut xi);
        for i in 0..l {
            out[i] = (0..l).map(|j| self.factor[(i, j)] * xi[j]).sum();
        }
    }
}

/// Adds an independent `N(0, Gamma)` offset to every particle.
pub fn perturb(cloud: &ParameterCloud, noise: &ExplorationNoise, rng: &mut SimRng) -> Result<ParameterCloud> {
    if noise.dim() != cloud.dim() {
        return Err(Error::Dimension(format!(
            "exploration noise of dim {} for parameters of dim {}",
            noise.dim(),
            cloud.dim()
        )));
    }
    let mut out = cloud.clone();
    if noise.is_zero() {
        return Ok(out);
    }
    let mut offset = vec![0.0; cloud.dim()];
    for mut col in out.particles.column_iter_mut() {
        noise.sample_into(rng, &mut offset);
        for (p, o) in col.iter_mut().zip(&offset) {
            *p += o;
        }
    }
    if let Some(pos) = out.particles.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "perturbed particle {} is non-finite",
            pos / cloud.dim()
        )));
    }
    Ok(out)
}

/// Gaussian likelihood of the state estimate under a particle's prediction,
/// with regularised covariance `Omega + rho I`.
#[derive(Debug, Clone)]
pub struct ParameterLikelihood {
    cov: GaussianNoise,
    suppress_noise: bool,
}

impl ParameterLikelihood {
    /// `rho = max(1e-8, 1e-4 tr(Omega) / d)`.
    pub fn from_model(model: &dyn Dynamics) -> Result<Self> {
        let omega = model.noise_cov();
        let d = omega.nrows();
        if d != model.state_dim() || omega.ncols() != d {
            return Err(Error::Dimension("model noise covariance must be d x d".into()));
        }
        let rho = (1e-4 * omega.trace() / d as f64).max(1e-8);
        let reg = omega + DMatrix::identity(d, d) * rho;
        Ok(Self {
            cov: GaussianNoise::new(reg)?,
            suppress_noise: false,
        })
    }

    /// Uses `cov` as is.
    pub fn with_covariance(cov: GaussianNoise) -> Self {
        Self {
            cov,
            suppress_noise: false,
        }
    }

    /// Drop the model-noise draw from the particle predictions.
    pub fn suppress_noise(mut self, yes: bool) -> Self {
        self.suppress_noise = yes;
        self
    }

    pub fn covariance(&self) -> &GaussianNoise {
        &self.cov
    }

    pub fn noise_suppressed(&self) -> bool {
        self.suppress_noise
    }
}

/// Normalised particle weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub values: Vec<f64>,
    /// Every log-weight was non-finite, so the weights fell back to uniform.
    pub degenerate: bool,
    /// Effective sample size `1 / sum w^2`.
    pub ess: f64,
}

impl Weights {
    /// Normalises log-weights. Non-finite entries get weight zero.
    pub fn from_log(log_w: &[f64]) -> Self {
        let k = log_w.len();
        let max = log_w
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Self {
                values: vec![1.0 / k as f64; k],
                degenerate: true,
                ess: k as f64,
            };
        }
        let mut values: Vec<f64> = log_w
            .iter()
            .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = values.iter().sum();
        values.iter_mut().for_each(|w| *w /= total);
        let ess = 1.0 / values.iter().map(|w| w * w).sum::<f64>();
        Self {
            values,
            degenerate: false,
            ess,
        }
    }
}

/// Weighs each particle by `exp(-1/2 |x_k - x_est|^2_{Omega~^-1})` where
/// `x_k = f(x_prev, gamma_k) + omega_k`.
pub fn weigh(
    cloud: &ParameterCloud,
    x_prev: &[f64],
    x_est: &[f64],
    model: &dyn Dynamics,
    likelihood: &ParameterLikelihood,
    rng: &mut SimRng,
) -> Result<Weights> {
    let d = model.state_dim();
    if x_prev.len() != d || x_est.len() != d || cloud.dim() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "weigh: x_prev {} / x_est {} / params {} for model with d = {}, l = {}",
            x_prev.len(),
            x_est.len(),
            cloud.dim(),
            d,
            model.param_dim()
        )));
    }
    if likelihood.cov.dim() != d {
        return Err(Error::Dimension("likelihood covariance does not match the state".into()));
    }
    let mut xi = vec![0.0; model.noise_dim()];
    let mut pred = vec![0.0; d];
    let mut log_w = Vec::with_capacity(cloud.count());
    for k in 0..cloud.count() {
        if !likelihood.suppress_noise {
            fill_standard_normal(rng, &mut xi);
        }
        model.step(x_prev, cloud.particle(k), &xi, &mut pred);
        for (p, e) in pred.iter_mut().zip(x_est) {
            *p -= e;
        }
        log_w.push(-0.5 * mahalanobis_sq(&likelihood.cov, &pred));
    }
    Ok(Weights::from_log(&log_w))
}

/// Systematic resampling indices for offset `u` in `[0, 1/K)`.
///
/// Position `u + k/K` selects the first particle whose cumulative weight
/// exceeds it.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let k = weights.len();
    let step = 1.0 / k as f64;
    // rounding in the running sum must never select a trailing zero weight
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(k - 1);
    let cum_at = |i: usize, c: f64| if i == last { f64::INFINITY } else { c };
    let mut out = Vec::with_capacity(k);
    let mut i = 0;
    let mut running = weights[0];
    let mut cum = cum_at(0, running);
    for j in 0..k {
        let pos = u + j as f64 * step;
        while pos >= cum {
            i += 1;
            running += weights[i];
            cum = cum_at(i, running);
        }
        out.push(i);
    }
    out
}

/// Systematic resampling to an equally weighted cloud of the same size.
pub fn resample(cloud: &ParameterCloud, weights: &[f64], rng: &mut SimRng) -> Result<ParameterCloud> {
    check_simplex(weights, cloud.count())?;
    let u = rng.random::<f64>() / cloud.count() as f64;
    let idx = systematic_indices(weights, u);
    let l = cloud.dim();
    let mut m = DMatrix::zeros(l, cloud.count());
    for (j, &i) in idx.iter().enumerate() {
        m.column_mut(j).copy_from_slice(cloud.particle(i));
    }
    ParameterCloud::new(m)
}

/// Arithmetic mean of an equally weighted cloud.
pub fn estimate(cloud: &ParameterCloud) -> DVector<f64> {
    cloud.estimate()
}
