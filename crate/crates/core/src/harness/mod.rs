//! Twin-experiment runner: configuration, repeats, metrics and CSV outputs.
//!
//! Output files in `output.dir`:
//!
//! * `estimate_rNNN.csv`, `truth_rNNN.csv`: `step, x0.., p0..`, one row per
//!   step including the initial one.
//! * `metrics.csv`: long format `run, step, metric, value` with metrics
//!   `state_rmse` and `param_abs_err_k`.
//! * `summary.csv`: `run, status, time_avg_state_rmse, message`.
//! * `aggregate.csv`: `step, metric, mean, std, n` over the successful repeats.
//! * `ensembles_rNNN.csv` (optional): `step, member, x0..`.
//! * `manifest.toml`: the resolved configuration plus any sampled
//!   observation masks; running it reproduces every CSV byte for byte.

pub mod config;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augenkf::{self, AugmentedEnsemble, EnkfOptions};
use crate::diffusion::NoiseSchedule;
use crate::direct_filter::{ExplorationNoise, ParameterCloud};
use crate::ensemble::StateEnsemble;
use crate::error::{Error, Result};
use crate::models::Truth;
use crate::rng::{fill_standard_normal, label, SeedTree, SimRng};
use crate::system::Dynamics;
use crate::united::{self, AssimilationRecord, UnitedFilterConfig};

pub use config::{
    ExperimentConfig, ExperimentName, FilterConfig, FilterKind, FilterSettings, OutputConfig, Recorded,
    RepeatMasks, RunConfig,
};
pub use metrics::{aggregate, compute_rmse, MetricsTable};

/// Truth, filter record and metrics of one repeat.
#[derive(Debug, Clone)]
pub struct RepeatRun {
    pub truth: Truth,
    pub record: AssimilationRecord,
    pub metrics: MetricsTable,
}

/// Seed tree of repeat `r`; the truth depends on nothing else, so runs that
/// differ only in the filter see the same truth.
pub fn repeat_seeds(master_seed: u64, r: usize) -> SeedTree {
    SeedTree::new(master_seed).child(label::REPEAT, &[r as u64])
}

pub fn dynamics(exp: &ExperimentConfig) -> Box<dyn Dynamics> {
    match exp.name {
        ExperimentName::Sir => Box::new(exp.sir.dynamics()),
        ExperimentName::FokkerPlanck => Box::new(exp.fokker_planck.dynamics()),
        ExperimentName::Lorenz96 => Box::new(exp.lorenz96.dynamics()),
        ExperimentName::LinearGaussianOracle => Box::new(exp.linear_gaussian_oracle.dynamics()),
    }
}

/// Simulates the truth of repeat `r`, replaying recorded masks when present.
pub fn simulate_truth(cfg: &RunConfig, r: usize) -> Result<Truth> {
    let seeds = repeat_seeds(cfg.experiment.master_seed, r);
    let exp = &cfg.experiment;
    match exp.name {
        ExperimentName::Sir => exp.sir.simulate(&seeds),
        ExperimentName::FokkerPlanck => exp.fokker_planck.simulate(&seeds),
        ExperimentName::Lorenz96 => exp.lorenz96.simulate_with_masks(&seeds, cfg.recorded_masks(r)),
        ExperimentName::LinearGaussianOracle => exp.linear_gaussian_oracle.simulate(&seeds),
    }
}

/// Centre of the initial state ensemble: the initial distribution's mean for
/// the linear-Gaussian oracle, the true initial state otherwise.
fn prior_center(exp: &ExperimentConfig, truth: &Truth) -> Vec<f64> {
    match exp.name {
        ExperimentName::LinearGaussianOracle => vec![exp.linear_gaussian_oracle.init_mean],
        _ => truth.states[0].clone(),
    }
}

fn gaussian_ensemble(center: &[f64], std: f64, count: usize, rng: &mut SimRng) -> Result<StateEnsemble> {
    let mut z = vec![0.0; center.len()];
    let samples: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            fill_standard_normal(rng, &mut z);
            center.iter().zip(&z).map(|(c, e)| c + std * e).collect()
        })
        .collect();
    StateEnsemble::from_samples(&samples)
}

/// Runs the configured filter on an already simulated truth.
pub fn run_filter(cfg: &RunConfig, s: &FilterSettings, r: usize, truth: &Truth) -> Result<AssimilationRecord> {
    let exp = &cfg.experiment;
    let model = dynamics(exp);
    let tree = repeat_seeds(exp.master_seed, r).child(label::FILTER, &[s.kind.index()]);
    let seed = tree.derive(label::FILTER, &[]);
    let center = prior_center(exp, truth);
    let count = match s.kind {
        FilterKind::Augenkf => s.members,
        _ => s.ensemble_size,
    };
    let ensemble = gaussian_ensemble(&center, s.prior_std, count, &mut tree.stream(label::PRIOR, &[0]))?;
    let exploration = ExplorationNoise::diagonal(&s.exploration_std, s.exploration_decay)?;
    let united_cfg = || -> Result<UnitedFilterConfig> {
        let mut u = UnitedFilterConfig::new(s.ensemble_size, exploration.clone(), seed);
        u.iterations = s.iterations;
        u.minibatch = s.minibatch;
        u.schedule = NoiseSchedule::new(s.t_min, s.pseudo_steps)?;
        u.strict_regeneration = s.strict_regeneration;
        u.store_ensembles = cfg.output.store_ensembles;
        Ok(u)
    };
    match s.kind {
        FilterKind::United => {
            let cloud = ParameterCloud::gaussian(
                &s.init_param_mean,
                &s.init_param_std,
                s.particles,
                &mut tree.stream(label::PRIOR, &[1]),
            )?;
            united::run(model.as_ref(), &truth.measurements, ensemble, cloud, &united_cfg()?)
        }
        FilterKind::EnsfFixedParam => {
            united::run_fixed_parameter(model.as_ref(), &s.fixed_params, &truth.measurements, ensemble, &united_cfg()?)
        }
        FilterKind::Augenkf => {
            let cloud = ParameterCloud::gaussian(
                &s.init_param_mean,
                &s.init_param_std,
                s.members,
                &mut tree.stream(label::PRIOR, &[1]),
            )?;
            let init = AugmentedEnsemble::stack(&ensemble, &cloud)?;
            augenkf::run(
                model.as_ref(),
                &truth.measurements,
                init,
                &exploration,
                &EnkfOptions { inflation: s.inflation },
                seed,
            )
        }
    }
}

/// Simulates the truth of repeat `r`, runs the filter and scores it.
pub fn run_repeat(cfg: &RunConfig, s: &FilterSettings, r: usize) -> Result<RepeatRun> {
    let truth = simulate_truth(cfg, r)?;
    let record = run_filter(cfg, s, r, &truth)?;
    let true_params = cfg.experiment.true_params();
    let metrics = MetricsTable::new(&record.states(), &truth.states, &record.parameters(), &true_params)?;
    Ok(RepeatRun { truth, record, metrics })
}

/// Result of one repeat as kept by the runner.
#[derive(Debug)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub truth: Option<Truth>,
    pub result: Result<RepeatRun>,
}

#[derive(Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub outcomes: Vec<RepeatOutcome>,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }

    /// 0 when every repeat succeeded, 2 when all failed, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.failures() {
            0 => 0,
            f if f == self.outcomes.len() => 2,
            _ => 3,
        }
    }
}

/// Runs every repeat and writes the outputs. Filter failures are recorded per
/// repeat; only configuration and I/O errors abort the run.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let mut resolved = cfg.resolved()?;
    let s = resolved.settings()?;
    let one = |r: usize| -> RepeatOutcome {
        match simulate_truth(&resolved, r) {
            Err(e) => RepeatOutcome { repeat: r, truth: None, result: Err(e) },
            Ok(truth) => {
                let result = run_filter(&resolved, &s, r, &truth).and_then(|record| {
                    let metrics = MetricsTable::new(
                        &record.states(),
                        &truth.states,
                        &record.parameters(),
                        &resolved.experiment.true_params(),
                    )?;
                    Ok(RepeatRun { truth: truth.clone(), record, metrics })
                });
                if let Err(e) = &result {
                    log::warn!("repeat {r} failed: {e}");
                }
                RepeatOutcome { repeat: r, truth: Some(truth), result }
            }
        }
    };
    let n = resolved.experiment.n_repeats;
    let outcomes: Vec<RepeatOutcome> = if resolved.output.parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    };

    if resolved.experiment.name == ExperimentName::Lorenz96 {
        let masks = outcomes
            .iter()
            .filter_map(|o| {
                o.truth.as_ref().map(|t| RepeatMasks {
                    repeat: o.repeat,
                    masks: t.masks.clone(),
                })
            })
            .collect();
        resolved.recorded = Some(Recorded { masks });
    }
    let dir = resolved.output.dir.clone();
    write_outputs(&dir, &resolved, &outcomes)?;
    Ok(RunReport { dir, outcomes })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn trajectory_header(d: usize, p: usize) -> Vec<String> {
    std::iter::once("step".to_string())
        .chain((0..d).map(|i| format!("x{i}")))
        .chain((0..p).map(|k| format!("p{k}")))
        .collect()
}

fn trajectory_rows<'a>(states: &'a [Vec<f64>], params: &'a [Vec<f64>]) -> impl Iterator<Item = Vec<String>> + 'a {
    states.iter().zip(params).enumerate().map(|(n, (x, p))| {
        std::iter::once(n.to_string())
            .chain(x.iter().chain(p).map(f64::to_string))
            .collect()
    })
}

fn write_outputs(dir: &Path, cfg: &RunConfig, outcomes: &[RepeatOutcome]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let true_params = cfg.experiment.true_params();
    let p = true_params.len();
    let mut metric_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut tables = Vec::new();
    for o in outcomes {
        let r = o.repeat;
        if let Some(truth) = &o.truth {
            let params = vec![true_params.clone(); truth.states.len()];
            let d = truth.states[0].len();
            let bytes = csv_bytes(&trajectory_header(d, p), trajectory_rows(&truth.states, &params))?;
            write_atomic(&dir.join(format!("truth_r{r:03}.csv")), &bytes)?;
        }
        match &o.result {
            Ok(run) => {
                let states = run.record.states();
                let d = states[0].len();
                let bytes = csv_bytes(&trajectory_header(d, p), trajectory_rows(&states, &run.record.parameters()))?;
                write_atomic(&dir.join(format!("estimate_r{r:03}.csv")), &bytes)?;
                if cfg.output.store_ensembles && run.record.steps.iter().any(|st| st.ensemble.is_some()) {
                    let header: Vec<String> = ["step".to_string(), "member".to_string()]
                        .into_iter()
                        .chain((0..d).map(|i| format!("x{i}")))
                        .collect();
                    let rows = run.record.steps.iter().flat_map(|st| {
                        st.ensemble.iter().flatten().enumerate().map(move |(j, x)| {
                            [st.step.to_string(), j.to_string()]
                                .into_iter()
                                .chain(x.iter().map(f64::to_string))
                                .collect()
                        })
                    });
                    write_atomic(&dir.join(format!("ensembles_r{r:03}.csv")), &csv_bytes(&header, rows)?)?;
                }
                let names = run.metrics.metric_names();
                for step in 0..run.metrics.rows() {
                    for (name, v) in names.iter().zip(run.metrics.row(step)) {
                        metric_rows.push(vec![r.to_string(), step.to_string(), name.clone(), v.to_string()]);
                    }
                }
                summary_rows.push(vec![
                    r.to_string(),
                    "ok".into(),
                    run.metrics.time_averaged_rmse().to_string(),
                    String::new(),
                ]);
                tables.push(&run.metrics);
            }
            Err(e) => summary_rows.push(vec![r.to_string(), "failed".into(), String::new(), e.to_string()]),
        }
    }
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    write_atomic(
        &dir.join("metrics.csv"),
        &csv_bytes(&header(&["run", "step", "metric", "value"]), metric_rows)?,
    )?;
    write_atomic(
        &dir.join("summary.csv"),
        &csv_bytes(&header(&["run", "status", "time_avg_state_rmse", "message"]), summary_rows)?,
    )?;
    let agg = aggregate(&tables)?.into_iter().map(|a| {
        vec![a.step.to_string(), a.metric, a.mean.to_string(), a.std.to_string(), a.n.to_string()]
    });
    write_atomic(
        &dir.join("aggregate.csv"),
        &csv_bytes(&header(&["step", "metric", "mean", "std", "n"]), agg)?,
    )?;
    write_atomic(&dir.join("manifest.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

/// Reads the `x*` columns of a trajectory CSV.
pub fn read_states(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols: Vec<usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::Input(format!("{}: no state columns", path.display())));
    }
    rdr.records()
        .enumerate()
        .map(|(n, rec)| {
            let rec = rec?;
            cols.iter()
                .map(|&c| {
                    rec.get(c).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| {
                        Error::Input(format!("{}: row {n}, column {c} is not a number", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

