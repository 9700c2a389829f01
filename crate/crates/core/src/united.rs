//! The United Filter: per assimilation step, `L` rounds of EnSF state
//! estimation under the current parameter estimate alternating with direct
//! filter parameter estimation under the current state estimate, followed by
//! a final state pass with the calibrated parameters.

use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::diffusion::{Damping, NoiseSchedule};
use crate::direct_filter::{perturb, resample, weigh, ExplorationNoise, ParameterCloud, ParameterLikelihood};
use crate::ensemble::StateEnsemble;
use crate::ensf::{analysis_step, predict_ensemble, AnalysisConfig};
use crate::error::{Error, Result};
use crate::rng::{label, SeedTree};
use crate::system::{Dynamics, Measurement};

/// Path component that marks the final state pass of a step.
pub const FINAL_PASS: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct UnitedFilterConfig {
    /// State ensemble size `J`.
    pub ensemble_size: usize,
    /// Inner iterations `L`.
    pub iterations: usize,
    /// Score mini-batch `M`; `None` is the full ensemble.
    pub minibatch: Option<usize>,
    pub schedule: NoiseSchedule,
    pub exploration: ExplorationNoise,
    pub seed: u64,
    /// Re-sample the step-`n` posterior from its score at every iteration
    /// instead of reusing the stored ensemble.
    pub strict_regeneration: bool,
    /// Drop the model-noise draw from the particle predictions.
    pub suppress_particle_noise: bool,
    /// Keep every posterior ensemble and particle cloud in the record.
    pub store_ensembles: bool,
}

impl UnitedFilterConfig {
    pub fn new(ensemble_size: usize, exploration: ExplorationNoise, seed: u64) -> Self {
        Self {
            ensemble_size,
            iterations: 2,
            minibatch: None,
            schedule: NoiseSchedule::default(),
            exploration,
            seed,
            strict_regeneration: false,
            suppress_particle_noise: false,
            store_ensembles: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Domain("ensemble size J must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Domain("iterations L must be at least 1".into()));
        }
        if let Some(m) = self.minibatch {
            if m == 0 || m > self.ensemble_size {
                return Err(Error::Domain(format!(
                    "mini-batch M = {m} must lie in 1..={}",
                    self.ensemble_size
                )));
            }
        }
        Ok(())
    }

    fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            schedule: self.schedule,
            minibatch: self.minibatch,
            n_out: Some(self.ensemble_size),
            damping: Damping::linear(),
        }
    }
}

/// Intermediate estimates of one inner iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    /// State estimate of stage I under the incoming parameter estimate.
    pub x_bar: Vec<f64>,
    /// Parameter estimate after stage II.
    pub gamma_bar: Vec<f64>,
    pub ess: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub x_bar: Vec<f64>,
    pub gamma_bar: Vec<f64>,
    pub iterations: Vec<IterationTrace>,
    /// Some inner iteration fell back to uniform weights.
    pub degenerate: bool,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<Vec<Vec<f64>>>,
}

// timing is not part of a record's identity
impl PartialEq for StepRecord {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.x_bar == o.x_bar
            && self.gamma_bar == o.gamma_bar
            && self.iterations == o.iterations
            && self.degenerate == o.degenerate
            && self.ensemble == o.ensemble
            && self.particles == o.particles
    }
}

impl StepRecord {
    pub(crate) fn new(step: usize, x_bar: &DVector<f64>, gamma_bar: &DVector<f64>) -> Self {
        Self {
            step,
            x_bar: x_bar.as_slice().to_vec(),
            gamma_bar: gamma_bar.as_slice().to_vec(),
            iterations: Vec::new(),
            degenerate: false,
            wall_clock_secs: 0.0,
            ensemble: None,
            particles: None,
        }
    }
}

/// Estimates for the initial condition and every assimilated observation.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AssimilationRecord {
    pub steps: Vec<StepRecord>,
}

impl AssimilationRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.x_bar.clone()).collect()
    }

    pub fn parameters(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.gamma_bar.clone()).collect()
    }
}

fn columns(e: &StateEnsemble) -> Vec<Vec<f64>> {
    e.matrix().column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Data from which the step-`n` posterior can be re-sampled.
#[derive(Debug, Clone)]
enum ScoreSource {
    /// Prior draws; nothing to regenerate from.
    Initial,
    /// Forecast ensemble and measurement of the last analysis.
    Analysis { predicted: StateEnsemble, measurement: Measurement },
}

/// Filter state carried between assimilation steps.
#[derive(Debug, Clone)]
pub struct FilterState {
    /// Number of observations assimilated so far.
    pub step: usize,
    pub ensemble: StateEnsemble,
    pub x_bar: DVector<f64>,
    pub cloud: ParameterCloud,
    source: ScoreSource,
}

impl FilterState {
    pub fn initial(ensemble: StateEnsemble, cloud: ParameterCloud) -> Self {
        Self {
            step: 0,
            x_bar: ensemble.mean(),
            ensemble,
            cloud,
            source: ScoreSource::Initial,
        }
    }
}

/// One predicted-and-assimilated state pass.
struct StatePass {
    predicted: StateEnsemble,
    posterior: StateEnsemble,
    x_bar: DVector<f64>,
}

fn state_pass(
    state: &FilterState,
    gamma: &[f64],
    measurement: &Measurement,
    model: &dyn Dynamics,
    cfg: &UnitedFilterConfig,
    seeds: &SeedTree,
    n: u64,
    l: u64,
) -> Result<StatePass> {
    let regenerated;
    let base = match (&state.source, cfg.strict_regeneration) {
        (ScoreSource::Analysis { predicted, measurement: m }, true) => {
            let mut rng = seeds.stream(label::REGENERATION, &[n, l]);
            regenerated = analysis_step(predicted, &m.value, m.operator.as_ref(), &cfg.analysis(), &mut rng)?.0;
            &regenerated
        }
        _ => &state.ensemble,
    };
    let predicted = predict_ensemble(base, gamma, model, &mut seeds.stream(label::PREDICTION, &[n, l]))?;
    let (posterior, x_bar) = analysis_step(
        &predicted,
        &measurement.value,
        measurement.operator.as_ref(),
        &cfg.analysis(),
        &mut seeds.stream(label::REVERSE_SDE, &[n, l]),
    )?;
    Ok(StatePass { predicted, posterior, x_bar })
}

/// Assimilates one measurement. Returns the new filter state and the step's
/// record.
pub fn assimilate_step(
    state: &FilterState,
    measurement: &Measurement,
    model: &dyn Dynamics,
    likelihood: &ParameterLikelihood,
    cfg: &UnitedFilterConfig,
) -> Result<(FilterState, StepRecord)> {
    let t0 = Instant::now();
    let d = model.state_dim();
    if state.ensemble.dim() != d || state.cloud.dim() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "filter state (d = {}, l = {}) does not match the model (d = {d}, l = {})",
            state.ensemble.dim(),
            state.cloud.dim(),
            model.param_dim()
        )));
    }
    if measurement.operator.state_dim() != d {
        return Err(Error::Dimension("observation operator does not match the state".into()));
    }
    let seeds = SeedTree::new(cfg.seed);
    let n = state.step as u64;
    let exploration = cfg.exploration.decayed(state.step);

    let mut cloud = state.cloud.clone();
    let mut gamma = cloud.estimate();
    let mut traces = Vec::with_capacity(cfg.iterations);
    for l in 0..cfg.iterations as u64 {
        let pass = state_pass(state, gamma.as_slice(), measurement, model, cfg, &seeds, n, l)?;

        let perturbed = perturb(&cloud, &exploration, &mut seeds.stream(label::PERTURBATION, &[n, l]))?;
        let w = weigh(
            &perturbed,
            state.x_bar.as_slice(),
            pass.x_bar.as_slice(),
            model,
            likelihood,
            &mut seeds.stream(label::PARTICLE_PREDICTION, &[n, l]),
        )?;
        if w.degenerate {
            log::warn!("step {}: particle weights degenerate at iteration {l}", state.step + 1);
        }
        cloud = resample(&perturbed, &w.values, &mut seeds.stream(label::RESAMPLING, &[n, l]))?;
        gamma = cloud.estimate();
        traces.push(IterationTrace {
            x_bar: pass.x_bar.as_slice().to_vec(),
            gamma_bar: gamma.as_slice().to_vec(),
            ess: w.ess,
            degenerate: w.degenerate,
        });
    }

    let fin = state_pass(state, gamma.as_slice(), measurement, model, cfg, &seeds, n, FINAL_PASS)?;
    let mut record = StepRecord::new(state.step + 1, &fin.x_bar, &gamma);
    record.degenerate = traces.iter().any(|t| t.degenerate);
    record.iterations = traces;
    if cfg.store_ensembles {
        record.ensemble = Some(columns(&fin.posterior));
        record.particles = Some(cloud.particles().column_iter().map(|c| c.iter().copied().collect()).collect());
    }
    record.wall_clock_secs = t0.elapsed().as_secs_f64();

    let next = FilterState {
        step: state.step + 1,
        ensemble: fin.posterior,
        x_bar: fin.x_bar,
        cloud,
        source: ScoreSource::Analysis {
            predicted: fin.predicted,
            measurement: measurement.clone(),
        },
    };
    Ok((next, record))
}

fn initial_record(state: &FilterState, cfg_store: bool) -> StepRecord {
    let mut r = StepRecord::new(0, &state.x_bar, &state.cloud.estimate());
    if cfg_store {
        r.ensemble = Some(columns(&state.ensemble));
        r.particles = Some(state.cloud.particles().column_iter().map(|c| c.iter().copied().collect()).collect());
    }
    r
}

/// Runs the United Filter over a measurement sequence.
pub fn run(
    model: &dyn Dynamics,
    measurements: &[Measurement],
    init_ensemble: StateEnsemble,
    init_cloud: ParameterCloud,
    cfg: &UnitedFilterConfig,
) -> Result<AssimilationRecord> {
    cfg.validate()?;
    if measurements.is_empty() {
        return Err(Error::Domain("no measurements to assimilate".into()));
    }
    if cfg.exploration.dim() != model.param_dim() {
        return Err(Error::Dimension("exploration noise does not match the parameters".into()));
    }
    let likelihood = ParameterLikelihood::from_model(model)?.suppress_noise(cfg.suppress_particle_noise);
    let mut state = FilterState::initial(init_ensemble, init_cloud);
    let mut record = AssimilationRecord {
        steps: vec![initial_record(&state, cfg.store_ensembles)],
    };
    for (i, m) in measurements.iter().enumerate() {
        let (next, step) = assimilate_step(&state, m, model, &likelihood, cfg).map_err(|e| at_step(e, i + 1))?;
        record.steps.push(step);
        state = next;
    }
    Ok(record)
}

/// Pure EnSF with the parameters held fixed. Uses the same random streams as
/// the final pass of [`run`], so a frozen United Filter reproduces it exactly.
pub fn run_fixed_parameter(
    model: &dyn Dynamics,
    gamma: &[f64],
    measurements: &[Measurement],
    init_ensemble: StateEnsemble,
    cfg: &UnitedFilterConfig,
) -> Result<AssimilationRecord> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let gamma_v = DVector::from_column_slice(gamma);
    let mut ensemble = init_ensemble;
    let mut record = AssimilationRecord::default();
    let mut first = StepRecord::new(0, &ensemble.mean(), &gamma_v);
    if cfg.store_ensembles {
        first.ensemble = Some(columns(&ensemble));
    }
    record.steps.push(first);
    for (i, m) in measurements.iter().enumerate() {
        let t0 = Instant::now();
        let n = i as u64;
        let step = || -> Result<(StateEnsemble, DVector<f64>)> {
            let predicted = predict_ensemble(&ensemble, gamma, model, &mut seeds.stream(label::PREDICTION, &[n, FINAL_PASS]))?;
            analysis_step(
                &predicted,
                &m.value,
                m.operator.as_ref(),
                &cfg.analysis(),
                &mut seeds.stream(label::REVERSE_SDE, &[n, FINAL_PASS]),
            )
        };
        let (posterior, x_bar) = step().map_err(|e| at_step(e, i + 1))?;
        let mut r = StepRecord::new(i + 1, &x_bar, &gamma_v);
        if cfg.store_ensembles {
            r.ensemble = Some(columns(&posterior));
        }
        r.wall_clock_secs = t0.elapsed().as_secs_f64();
        record.steps.push(r);
        ensemble = posterior;
    }
    Ok(record)
}

pub(crate) fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("assimilation step {step}: {msg}")),
        other => other,
    }
}
