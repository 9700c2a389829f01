//! Benchmark problems and twin-experiment truth simulation.

pub mod fokker_planck;
pub mod linear_gaussian;
pub mod lorenz96;
pub mod sir;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, label, SeedTree};
use crate::system::{Dynamics, Measurement, Observation};

pub use fokker_planck::FokkerPlanckConfig;
pub use linear_gaussian::LinearGaussianConfig;
pub use lorenz96::{Lorenz96Config, ObservationMask};
pub use sir::SirConfig;

/// One simulated truth trajectory and its observations.
///
/// `states[0]` is the initial state; `measurements[n - 1]` observes `states[n]`.
#[derive(Debug, Clone)]
pub struct Truth {
    pub states: Vec<Vec<f64>>,
    pub measurements: Vec<Measurement>,
    /// Observation masks per step, empty for problems with a fixed operator.
    pub masks: Vec<ObservationMask>,
}

impl Truth {
    pub fn steps(&self) -> usize {
        self.measurements.len()
    }
}

/// Simulates `steps` transitions from `x0` and observes each new state.
///
/// Model noise for step `n` comes from the `truth/n` stream and observation
/// noise from `observation/n`; with `obs_noise` false the observations are
/// exactly `g(X_n)`.
pub fn simulate<F>(
    model: &dyn Dynamics,
    params: &[f64],
    x0: Vec<f64>,
    steps: usize,
    seeds: &SeedTree,
    obs_noise: bool,
    mut operator: F,
) -> Result<Truth>
where
    F: FnMut(usize) -> Result<Arc<dyn Observation>>,
{
    let d = model.state_dim();
    if x0.len() != d {
        return Err(Error::Dimension(format!("initial state of length {} for dim {d}", x0.len())));
    }
    if params.len() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "{} parameters for a model with {}",
            params.len(),
            model.param_dim()
        )));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    states.push(x0);
    let mut xi = vec![0.0; model.noise_dim()];
    for n in 1..=steps {
        let mut rng = seeds.stream(label::TRUTH, &[n as u64]);
        fill_standard_normal(&mut rng, &mut xi);
        let mut next = vec![0.0; d];
        model.step(&states[n - 1], params, &xi, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("truth diverged at step {n}")));
        }
        let op = operator(n)?;
        let m = op.obs_dim();
        let mut y = vec![0.0; m];
        op.observe(&next, &mut y);
        if obs_noise {
            let mut eps = vec![0.0; m];
            op.noise().sample(&mut seeds.stream(label::OBSERVATION, &[n as u64]), &mut eps);
            for (yi, e) in y.iter_mut().zip(&eps) {
                *yi += e;
            }
        }
        measurements.push(Measurement::new(op, y)?);
        states.push(next);
    }
    Ok(Truth {
        states,
        measurements,
        masks: Vec::new(),
    })
}

impl SirConfig {
    pub fn simulate(&self, seeds: &SeedTree) -> Result<Truth> {
        self.validate()?;
        let op: Arc<dyn Observation> = Arc::new(self.observation()?);
        simulate(&self.dynamics(), &self.true_params(), self.init.to_vec(), self.steps, seeds, true, |_| {
            Ok(op.clone())
        })
    }
}

impl FokkerPlanckConfig {
    pub fn simulate(&self, seeds: &SeedTree) -> Result<Truth> {
        self.validate()?;
        let op: Arc<dyn Observation> = Arc::new(self.observation()?);
        simulate(
            &self.dynamics(),
            &self.true_params(),
            self.initial_profile(),
            self.steps,
            seeds,
            true,
            |_| Ok(op.clone()),
        )
    }
}

impl LinearGaussianConfig {
    /// The initial state is drawn from `N(init_mean, init_var)` on the `truth` stream.
    pub fn simulate(&self, seeds: &SeedTree) -> Result<Truth> {
        self.validate()?;
        let mut z = [0.0];
        fill_standard_normal(&mut seeds.stream(label::TRUTH, &[]), &mut z);
        let x0 = vec![self.init_mean + self.init_var.sqrt() * z[0]];
        let op: Arc<dyn Observation> = Arc::new(self.observation()?);
        simulate(&self.dynamics(), &self.true_params(), x0, self.steps, seeds, true, |_| Ok(op.clone()))
    }
}

impl Lorenz96Config {
    /// Initial truth `F / gamma + init_perturbation * xi`; a fresh mask is
    /// drawn for every step from the `mask/n` stream.
    pub fn initial_truth(&self, seeds: &SeedTree) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        fill_standard_normal(&mut seeds.stream(label::TRUTH, &[]), &mut z);
        let base = self.forcing / self.gamma;
        z.iter().map(|v| base + self.init_perturbation * v).collect()
    }

    pub fn simulate(&self, seeds: &SeedTree) -> Result<Truth> {
        self.simulate_with_masks(seeds, None)
    }

    /// Like [`Self::simulate`] but replays `masks` (one per step) instead of
    /// drawing them.
    pub fn simulate_with_masks(&self, seeds: &SeedTree, masks: Option<&[ObservationMask]>) -> Result<Truth> {
        self.validate()?;
        if let Some(m) = masks {
            if m.len() != self.steps {
                return Err(Error::config(
                    "recorded.masks",
                    format!("{} masks recorded for {} steps", m.len(), self.steps),
                ));
            }
        }
        let mut used = Vec::with_capacity(self.steps);
        let mut truth = simulate(
            &self.dynamics(),
            &self.true_params(),
            self.initial_truth(seeds),
            self.steps,
            seeds,
            true,
            |n| {
                let mask = match masks {
                    Some(m) => m[n - 1].clone(),
                    None => self.draw_mask(&mut seeds.stream(label::MASK, &[n as u64])),
                };
                let op: Arc<dyn Observation> = Arc::new(self.observation(&mask)?);
                used.push(mask);
                Ok(op)
            },
        )?;
        truth.masks = used;
        Ok(truth)
    }
}
