//! Ensemble score filter: forecast through the dynamics, then assimilate an
//! observation by reverse-time sampling from the damped posterior score.

use nalgebra::{DMatrix, DVector};

use crate::diffusion::{reverse_sde_sample, Damping, LikelihoodTerm, NoiseSchedule, ScoreField};
use crate::ensemble::StateEnsemble;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, SimRng};
use crate::system::{Dynamics, Observation};

/// `grad log p(y | z)` for a fixed observation vector.
pub struct ObservationLikelihood<'a> {
    obs: &'a dyn Observation,
    y: &'a [f64],
}

impl<'a> ObservationLikelihood<'a> {
    pub fn new(obs: &'a dyn Observation, y: &'a [f64]) -> Result<Self> {
        if y.len() != obs.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation of length {} for operator of dim {}",
                y.len(),
                obs.obs_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("observation vector is not finite".into()));
        }
        Ok(Self { obs, y })
    }
}

impl LikelihoodTerm for ObservationLikelihood<'_> {
    fn dim(&self) -> usize {
        self.obs.state_dim()
    }

    fn gradient(&self, z: &[f64], out: &mut [f64]) {
        self.obs.log_likelihood_grad(z, self.y, out);
    }

    fn curvature(&self, z: &[f64], out: &mut [f64]) {
        self.obs.gauss_newton_diag(z, out);
    }
}

/// Settings of one analysis step.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisConfig {
    pub schedule: NoiseSchedule,
    /// Kernel mini-batch size; `None` uses the whole prior ensemble.
    pub minibatch: Option<usize>,
    /// Posterior ensemble size; `None` keeps the prior ensemble size.
    pub n_out: Option<usize>,
    pub damping: Damping,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            minibatch: None,
            n_out: None,
            damping: Damping::linear(),
        }
    }
}

/// Pushes every sample through `model.step` with its own noise draw.
pub fn predict_ensemble(
    posterior: &StateEnsemble,
    params: &[f64],
    model: &dyn Dynamics,
    rng: &mut SimRng,
) -> Result<StateEnsemble> {
    let d = model.state_dim();
    if posterior.dim() != d || params.len() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "ensemble dim {} / params {} for model with d = {}, l = {}",
            posterior.dim(),
            params.len(),
            d,
            model.param_dim()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite model parameters".into()));
    }
    let mut out = DMatrix::zeros(d, posterior.count());
    let mut xi = vec![0.0; model.noise_dim()];
    for (j, mut col) in out.column_iter_mut().enumerate() {
        fill_standard_normal(rng, &mut xi);
        model.step(posterior.sample(j).as_slice(), params, &xi, col.as_mut_slice());
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("forecast of sample {j} is non-finite")));
        }
    }
    Ok(StateEnsemble::from_matrix_unchecked(out))
}

/// Assimilates `y` into the forecast ensemble. Returns the posterior ensemble
/// and its mean.
pub fn analysis_step(
    predicted: &StateEnsemble,
    y: &[f64],
    obs: &dyn Observation,
    cfg: &AnalysisConfig,
    rng: &mut SimRng,
) -> Result<(StateEnsemble, DVector<f64>)> {
    if obs.state_dim() != predicted.dim() {
        return Err(Error::Dimension(format!(
            "observation operator expects d = {}, ensemble has d = {}",
            obs.state_dim(),
            predicted.dim()
        )));
    }
    let likelihood = ObservationLikelihood::new(obs, y)?;
    let mut field = ScoreField::new(predicted, cfg.schedule.t_min())
        .with_likelihood(&likelihood)?
        .with_damping(cfg.damping);
    if let Some(m) = cfg.minibatch {
        field = field.with_minibatch(m)?;
    }
    let n_out = cfg.n_out.unwrap_or(predicted.count());
    let posterior = reverse_sde_sample(&field, &cfg.schedule, n_out, rng)?;
    let estimate = posterior.mean();
    Ok((posterior, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::CoordinateObservation;
    use rand::SeedableRng;

    /// `x' = gamma x + sqrt(q) xi`, scalar.
    struct Scalar {
        q: f64,
    }

    impl Dynamics for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn step(&self, s: &[f64], p: &[f64], xi: &[f64], out: &mut [f64]) {
            out[0] = p[0] * s[0] + self.q.sqrt() * xi[0];
        }
        fn noise_cov(&self) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.q)
        }
    }

    #[test]
    fn noiseless_linear_forecast() {
        let e = StateEnsemble::from_samples(&[vec![2.0], vec![3.0]]).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        let out = predict_ensemble(&e, &[0.5], &Scalar { q: 0.0 }, &mut rng).unwrap();
        assert_eq!(out.matrix().as_slice(), &[1.0, 1.5]);
        let same = predict_ensemble(&e, &[1.0], &Scalar { q: 0.0 }, &mut rng).unwrap();
        assert_eq!(same, e);
    }

    #[test]
    fn noisy_forecast_mean() {
        let n = 10_000;
        let e = StateEnsemble::replicated(&[1.0], n).unwrap();
        let sigma = 0.3;
        let mut rng = SimRng::seed_from_u64(1);
        let out = predict_ensemble(&e, &[1.0], &Scalar { q: sigma * sigma }, &mut rng).unwrap();
        assert!((out.mean()[0] - 1.0).abs() < 5.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn forecast_dimension_checks() {
        let e = StateEnsemble::from_samples(&[vec![2.0, 1.0]]).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        assert!(predict_ensemble(&e, &[0.5], &Scalar { q: 0.0 }, &mut rng).is_err());
        let e = StateEnsemble::from_samples(&[vec![2.0]]).unwrap();
        assert!(predict_ensemble(&e, &[f64::NAN], &Scalar { q: 0.0 }, &mut rng).is_err());
    }

    #[test]
    fn estimate_is_the_ensemble_mean() {
        let prior = StateEnsemble::from_samples(&(0..50).map(|i| vec![i as f64 / 50.0, 0.1]).collect::<Vec<_>>()).unwrap();
        let obs = CoordinateObservation::identity(2, 0.3).unwrap();
        let cfg = AnalysisConfig { n_out: Some(40), ..Default::default() };
        let (post, est) = analysis_step(&prior, &[0.4, 0.0], &obs, &cfg, &mut SimRng::seed_from_u64(2)).unwrap();
        assert_eq!((post.count(), post.dim()), (40, 2));
        assert_eq!(est, post.mean());
    }

    #[test]
    fn degenerate_prior_recovers_the_point() {
        let x = [0.7, -1.2, 3.0];
        let prior = StateEnsemble::replicated(&x, 200).unwrap();
        let obs = CoordinateObservation::identity(3, 0.05).unwrap();
        let (post, est) = analysis_step(&prior, &x, &obs, &AnalysisConfig::default(), &mut SimRng::seed_from_u64(3)).unwrap();
        let var = post.variance();
        for i in 0..3 {
            // first-order pseudo-time discretization lag plus Monte Carlo error
            let tol = 0.006 * x[i].abs() + 5.0 * (var[i] / 200.0).sqrt();
            assert!((est[i] - x[i]).abs() < tol, "{} vs {}", est[i], x[i]);
            assert!(var[i].sqrt() < 0.05);
        }
    }

    #[test]
    fn rejects_bad_observation() {
        let prior = StateEnsemble::replicated(&[0.0], 5).unwrap();
        let obs = CoordinateObservation::identity(1, 0.1).unwrap();
        let cfg = AnalysisConfig::default();
        let mut rng = SimRng::seed_from_u64(0);
        assert!(analysis_step(&prior, &[f64::NAN], &obs, &cfg, &mut rng).is_err());
        assert!(analysis_step(&prior, &[0.0, 1.0], &obs, &cfg, &mut rng).is_err());
    }
}
