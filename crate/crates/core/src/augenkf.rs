//! Augmented ensemble Kalman filter: parameters are carried as extra state
//! coordinates following a random walk, and the stacked vector is updated
//! with a stochastic (perturbed-observation) EnKF.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::direct_filter::{ExplorationNoise, ParameterCloud};
use crate::ensemble::StateEnsemble;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, label, SeedTree, SimRng};
use crate::system::{Dynamics, Measurement, Observation};
use crate::united::{at_step, AssimilationRecord, StepRecord};

/// `N` members of the stacked vector `[x; gamma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    // (d + l) x N
    samples: DMatrix<f64>,
    state_dim: usize,
}

impl AugmentedEnsemble {
    pub fn new(samples: DMatrix<f64>, state_dim: usize) -> Result<Self> {
        if samples.ncols() < 2 {
            return Err(Error::Dimension("augmented ensemble needs at least 2 members".into()));
        }
        if state_dim == 0 || state_dim > samples.nrows() {
            return Err(Error::Dimension(format!(
                "state dimension {state_dim} for augmented vectors of length {}",
                samples.nrows()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("member {} is non-finite", pos / samples.nrows())));
        }
        Ok(Self { samples, state_dim })
    }

    /// Stacks state samples and parameter particles column by column.
    pub fn stack(states: &StateEnsemble, params: &ParameterCloud) -> Result<Self> {
        if states.count() != params.count() {
            return Err(Error::Dimension(format!(
                "{} state samples but {} parameter particles",
                states.count(),
                params.count()
            )));
        }
        let d = states.dim();
        let l = params.dim();
        let mut m = DMatrix::zeros(d + l, states.count());
        m.view_mut((0, 0), (d, states.count())).copy_from(states.matrix());
        m.view_mut((d, 0), (l, states.count())).copy_from(params.particles());
        Self::new(m, d)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn param_dim(&self) -> usize {
        self.samples.nrows() - self.state_dim
    }

    pub fn count(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn state_block(&self) -> DMatrix<f64> {
        self.samples.rows(0, self.state_dim).into_owned()
    }

    pub fn param_block(&self) -> DMatrix<f64> {
        self.samples.rows(self.state_dim, self.param_dim()).into_owned()
    }

    pub fn state_mean(&self) -> DVector<f64> {
        self.samples.rows(0, self.state_dim).column_mean()
    }

    pub fn param_mean(&self) -> DVector<f64> {
        self.samples.rows(self.state_dim, self.param_dim()).column_mean()
    }
}

/// Propagates each member's state with its own parameters; parameters take a
/// random-walk step `gamma + xi`, `xi ~ N(0, Gamma)`.
pub fn forecast(
    ens: &AugmentedEnsemble,
    model: &dyn Dynamics,
    param_noise: &ExplorationNoise,
    rng: &mut SimRng,
) -> Result<AugmentedEnsemble> {
    let d = ens.state_dim;
    let l = ens.param_dim();
    if model.state_dim() != d || model.param_dim() != l || param_noise.dim() != l {
        return Err(Error::Dimension("augmented ensemble does not match the model".into()));
    }
    let mut out = ens.samples.clone();
    let mut xi = vec![0.0; model.noise_dim()];
    let mut step = vec![0.0; l];
    let zero_walk = param_noise.is_zero();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let src = ens.samples.column(j);
        let (x, gamma) = src.as_slice().split_at(d);
        fill_standard_normal(rng, &mut xi);
        model.step(x, gamma, &xi, &mut col.as_mut_slice()[..d]);
        if !zero_walk {
            param_noise.sample_into(rng, &mut step);
            for i in 0..l {
                col[d + i] += step[i];
            }
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("forecast member {j} is non-finite")));
        }
    }
    Ok(AugmentedEnsemble { samples: out, state_dim: d })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnkfOptions {
    /// Multiplicative inflation of the forecast anomalies; 1 disables it.
    pub inflation: f64,
}

impl Default for EnkfOptions {
    fn default() -> Self {
        Self { inflation: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct EnkfAnalysis {
    pub ensemble: AugmentedEnsemble,
    /// The innovation covariance needed a diagonal shift to factorise.
    pub regularized: bool,
}

/// Stochastic EnKF update with observation perturbations drawn from `rng`.
pub fn analysis(
    ens: &AugmentedEnsemble,
    y: &[f64],
    obs: &dyn Observation,
    opts: &EnkfOptions,
    rng: &mut SimRng,
) -> Result<EnkfAnalysis> {
    let mut xi = DMatrix::zeros(obs.obs_dim(), ens.count());
    fill_standard_normal(rng, xi.as_mut_slice());
    analysis_with_draws(ens, y, obs, opts, &xi)
}

/// Stochastic EnKF update with given standard normal draws `xi` (`m x N`);
/// member `i` receives the perturbation `L xi_i` with `L L^T = Sigma`.
pub fn analysis_with_draws(
    ens: &AugmentedEnsemble,
    y: &[f64],
    obs: &dyn Observation,
    opts: &EnkfOptions,
    xi: &DMatrix<f64>,
) -> Result<EnkfAnalysis> {
    let d = ens.state_dim;
    let n = ens.count();
    let m = obs.obs_dim();
    if obs.state_dim() != d || y.len() != m || xi.nrows() != m || xi.ncols() != n {
        return Err(Error::Dimension("EnKF analysis inputs have inconsistent sizes".into()));
    }
    if !(opts.inflation > 0.0 && opts.inflation.is_finite()) {
        return Err(Error::Domain(format!("inflation must be positive, got {}", opts.inflation)));
    }

    let mut z = ens.samples.clone();
    if opts.inflation != 1.0 {
        let mean = z.column_mean();
        for mut col in z.column_iter_mut() {
            let a = (&col - &mean) * opts.inflation;
            col.copy_from(&(a + &mean));
        }
    }

    let mut predicted = DMatrix::zeros(m, n);
    for (j, mut col) in predicted.column_iter_mut().enumerate() {
        obs.observe(&z.column(j).as_slice()[..d], col.as_mut_slice());
    }

    let z_mean = z.column_mean();
    let y_mean = predicted.column_mean();
    let mut a = z.clone();
    for mut col in a.column_iter_mut() {
        col -= &z_mean;
    }
    let mut b = predicted.clone();
    for mut col in b.column_iter_mut() {
        col -= &y_mean;
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let sigma = obs.noise();
    let s = &b * b.transpose() * scale + sigma.cov();

    // innovations y + eps_i - g(x_i)
    let mut innov = DMatrix::zeros(m, n);
    let mut eps = vec![0.0; m];
    let yv = DVector::from_column_slice(y);
    for j in 0..n {
        sigma.color(xi.column(j).as_slice(), &mut eps);
        let col = &yv + DVector::from_column_slice(&eps) - predicted.column(j);
        innov.set_column(j, &col);
    }

    let (solved, regularized) = solve_spd(s, innov)?;
    // z_i += C_zy S^-1 d_i with C_zy = A B^T / (N - 1)
    let update = (&a * b.transpose() * scale) * solved;
    z += update;
    if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("EnKF update of member {} is non-finite", pos / z.nrows())));
    }
    Ok(EnkfAnalysis {
        ensemble: AugmentedEnsemble { samples: z, state_dim: d },
        regularized,
    })
}

fn solve_spd(s: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("innovation covariance is non-finite".into()));
    }
    if let Some(ch) = s.clone().cholesky() {
        return Ok((ch.solve(&rhs), false));
    }
    let m = s.nrows();
    let mut shift = 1e-10 * (s.trace() / m as f64).abs().max(f64::MIN_POSITIVE);
    for _ in 0..20 {
        let shifted = &s + DMatrix::identity(m, m) * shift;
        if let Some(ch) = shifted.cholesky() {
            log::warn!("innovation covariance regularised with shift {shift:e}");
            return Ok((ch.solve(&rhs), true));
        }
        shift *= 10.0;
    }
    Err(Error::Numerical("innovation covariance could not be factorised".into()))
}

/// Runs the AugEnKF over a measurement sequence. Records carry the ensemble
/// means of the state and parameter blocks.
pub fn run(
    model: &dyn Dynamics,
    measurements: &[Measurement],
    init: AugmentedEnsemble,
    param_noise: &ExplorationNoise,
    opts: &EnkfOptions,
    seed: u64,
) -> Result<AssimilationRecord> {
    if measurements.is_empty() {
        return Err(Error::Domain("no measurements to assimilate".into()));
    }
    let seeds = SeedTree::new(seed);
    let mut ens = init;
    let mut record = AssimilationRecord::default();
    record.steps.push(StepRecord::new(0, &ens.state_mean(), &ens.param_mean()));
    for (i, meas) in measurements.iter().enumerate() {
        let t0 = Instant::now();
        let n = i as u64;
        let noise = param_noise.decayed(i);
        let step = || -> Result<EnkfAnalysis> {
            let f = forecast(&ens, model, &noise, &mut seeds.stream(label::ENKF_FORECAST, &[n]))?;
            analysis(
                &f,
                &meas.value,
                meas.operator.as_ref(),
                opts,
                &mut seeds.stream(label::ENKF_ANALYSIS, &[n]),
            )
        };
        let out = step().map_err(|e| at_step(e, i + 1))?;
        ens = out.ensemble;
        let mut r = StepRecord::new(i + 1, &ens.state_mean(), &ens.param_mean());
        r.degenerate = out.regularized;
        r.wall_clock_secs = t0.elapsed().as_secs_f64();
        record.steps.push(r);
    }
    Ok(record)
}
