use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FokkerPlanckConfig, LinearGaussianConfig, Lorenz96Config, ObservationMask, SirConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Sir,
    FokkerPlanck,
    Lorenz96,
    LinearGaussianOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    United,
    Augenkf,
    EnsfFixedParam,
}

impl FilterKind {
    pub fn index(self) -> u64 {
        match self {
            FilterKind::United => 0,
            FilterKind::Augenkf => 1,
            FilterKind::EnsfFixedParam => 2,
        }
    }
}

fn default_repeats() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: ExperimentName,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub sir: SirConfig,
    #[serde(default)]
    pub fokker_planck: FokkerPlanckConfig,
    #[serde(default)]
    pub lorenz96: Lorenz96Config,
    #[serde(default)]
    pub linear_gaussian_oracle: LinearGaussianConfig,
}

/// Filter settings. Unset entries take the experiment's defaults when the
/// configuration is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    /// EnSF ensemble size `J`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    /// Parameter particles `K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    /// Inner iterations `L` per assimilation step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Score mini-batch size; absent means the full ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
    /// Reverse-SDE steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_steps: Option<usize>,
    /// Per-parameter standard deviation of the exploration noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration_std: Option<Vec<f64>>,
    /// Per-step multiplicative decay of the exploration standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration_decay: Option<f64>,
    /// Centre and spread of the initial Gaussian parameter cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_param_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_param_std: Option<Vec<f64>>,
    /// Parameters used by `ensf_fixed_param`; the truth by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_params: Option<Vec<f64>>,
    /// Spread of the initial state ensemble around the prior centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    /// AugEnKF ensemble size `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    /// AugEnKF multiplicative inflation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_regeneration: Option<bool>,
}

impl FilterConfig {
    pub fn new(kind: FilterKind) -> Self {
        Self {
            kind,
            ensemble_size: None,
            particles: None,
            iterations: None,
            minibatch: None,
            t_min: None,
            pseudo_steps: None,
            exploration_std: None,
            exploration_decay: None,
            init_param_mean: None,
            init_param_std: None,
            fixed_params: None,
            prior_std: None,
            members: None,
            inflation: None,
            strict_regeneration: None,
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Also write the final posterior ensemble of every step (United Filter only).
    #[serde(default)]
    pub store_ensembles: bool,
    /// Run repeats on the thread pool; outputs do not depend on it.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            store_ensembles: false,
            parallel: true,
        }
    }
}

/// Observation masks of one repeat, written to the manifest so a re-run does
/// not depend on the mask sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatMasks {
    pub repeat: usize,
    pub masks: Vec<ObservationMask>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recorded {
    #[serde(default)]
    pub masks: Vec<RepeatMasks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub filter: FilterConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded: Option<Recorded>,
}

/// Fully resolved filter settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSettings {
    pub kind: FilterKind,
    pub ensemble_size: usize,
    pub particles: usize,
    pub iterations: usize,
    pub minibatch: Option<usize>,
    pub t_min: f64,
    pub pseudo_steps: usize,
    pub exploration_std: Vec<f64>,
    pub exploration_decay: f64,
    pub init_param_mean: Vec<f64>,
    pub init_param_std: Vec<f64>,
    pub fixed_params: Vec<f64>,
    pub prior_std: f64,
    pub members: usize,
    pub inflation: f64,
    pub strict_regeneration: bool,
}

impl ExperimentConfig {
    pub fn new(name: ExperimentName) -> Self {
        Self {
            name,
            n_repeats: default_repeats(),
            master_seed: 0,
            sir: SirConfig::default(),
            fokker_planck: FokkerPlanckConfig::default(),
            lorenz96: Lorenz96Config::default(),
            linear_gaussian_oracle: LinearGaussianConfig::default(),
        }
    }

    pub fn true_params(&self) -> Vec<f64> {
        match self.name {
            ExperimentName::Sir => self.sir.true_params(),
            ExperimentName::FokkerPlanck => self.fokker_planck.true_params(),
            ExperimentName::Lorenz96 => self.lorenz96.true_params(),
            ExperimentName::LinearGaussianOracle => self.linear_gaussian_oracle.true_params(),
        }
    }

    pub fn steps(&self) -> usize {
        match self.name {
            ExperimentName::Sir => self.sir.steps,
            ExperimentName::FokkerPlanck => self.fokker_planck.steps,
            ExperimentName::Lorenz96 => self.lorenz96.steps,
            ExperimentName::LinearGaussianOracle => self.linear_gaussian_oracle.steps,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::config("experiment.n_repeats", "must be at least 1"));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(Error::config("experiment.master_seed", "must fit in a signed 64-bit integer"));
        }
        match self.name {
            ExperimentName::Sir => self.sir.validate(),
            ExperimentName::FokkerPlanck => self.fokker_planck.validate(),
            ExperimentName::Lorenz96 => self.lorenz96.validate(),
            ExperimentName::LinearGaussianOracle => self.linear_gaussian_oracle.validate(),
        }
    }

    /// Filter defaults for this experiment.
    pub fn filter_defaults(&self, kind: FilterKind) -> FilterSettings {
        let truth = self.true_params();
        let base = |k: usize, t_min: f64, std: Vec<f64>, decay: f64, mean: Vec<f64>, spread: Vec<f64>, prior: f64| {
            FilterSettings {
                kind,
                ensemble_size: 200,
                particles: k,
                iterations: 2,
                minibatch: None,
                t_min,
                pseudo_steps: 100,
                exploration_std: std,
                exploration_decay: decay,
                init_param_mean: mean,
                init_param_std: spread,
                fixed_params: truth.clone(),
                prior_std: prior,
                members: 1000,
                inflation: 1.0,
                strict_regeneration: false,
            }
        };
        match self.name {
            ExperimentName::Sir => base(400, 1e-3, vec![0.05; 2], 1.0, vec![1.0, 1.0], vec![0.5; 2], 1e-3),
            ExperimentName::FokkerPlanck => base(400, 0.01, vec![0.3; 2], 0.97, vec![2.0, 10.0], vec![4.0; 2], 0.02),
            ExperimentName::Lorenz96 => base(1000, 0.01, vec![0.2; 3], 0.95, vec![8.0, 1.0, 1.0], vec![3.0; 3], 1.0),
            ExperimentName::LinearGaussianOracle => {
                let lg = &self.linear_gaussian_oracle;
                let mut s = base(400, 1e-3, vec![0.0], 1.0, truth.clone(), vec![0.0], lg.init_var.sqrt());
                s.ensemble_size = 2000;
                s.members = 2000;
                s
            }
        }
    }
}

impl RunConfig {
    pub fn new(experiment: ExperimentConfig, filter: FilterConfig) -> Self {
        Self {
            experiment,
            filter,
            output: OutputConfig::default(),
            recorded: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("cannot serialise configuration: {e}")))
    }

    /// Validated filter settings with every default filled in.
    pub fn settings(&self) -> Result<FilterSettings> {
        self.experiment.validate()?;
        let f = &self.filter;
        let mut s = self.experiment.filter_defaults(f.kind);
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &f.$field { s.$field = v.clone(); })*
            };
        }
        take!(
            ensemble_size,
            particles,
            iterations,
            t_min,
            pseudo_steps,
            exploration_std,
            exploration_decay,
            init_param_mean,
            init_param_std,
            fixed_params,
            prior_std,
            members,
            inflation,
            strict_regeneration
        );
        s.minibatch = f.minibatch;
        let p = self.experiment.true_params().len();
        let positive = [
            ("filter.ensemble_size", s.ensemble_size),
            ("filter.particles", s.particles),
            ("filter.iterations", s.iterations),
            ("filter.pseudo_steps", s.pseudo_steps),
            ("filter.members", s.members),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        if let Some(m) = s.minibatch {
            if m == 0 || m > s.ensemble_size {
                return Err(Error::config("filter.minibatch", "must lie in 1..=ensemble_size"));
            }
        }
        if !(s.t_min > 0.0 && s.t_min < 0.5) {
            return Err(Error::config("filter.t_min", "must lie in (0, 0.5)"));
        }
        let vectors = [
            ("filter.exploration_std", &s.exploration_std),
            ("filter.init_param_mean", &s.init_param_mean),
            ("filter.init_param_std", &s.init_param_std),
            ("filter.fixed_params", &s.fixed_params),
        ];
        for (path, v) in vectors {
            if v.len() != p {
                return Err(Error::config(path, format!("needs {p} entries, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(path, "entries must be finite"));
            }
        }
        if s.exploration_std.iter().chain(&s.init_param_std).any(|&x| x < 0.0) {
            return Err(Error::config("filter.exploration_std", "standard deviations must be non-negative"));
        }
        if !(s.exploration_decay > 0.0 && s.exploration_decay <= 1.0) {
            return Err(Error::config("filter.exploration_decay", "must lie in (0, 1]"));
        }
        if !(s.prior_std >= 0.0) {
            return Err(Error::config("filter.prior_std", "must be non-negative"));
        }
        if !(s.inflation >= 1.0) {
            return Err(Error::config("filter.inflation", "must be at least 1"));
        }
        if let Some(rec) = &self.recorded {
            if self.experiment.name != ExperimentName::Lorenz96 && !rec.masks.is_empty() {
                return Err(Error::config("recorded.masks", "only the lorenz96 experiment has masks"));
            }
            for m in &rec.masks {
                if m.repeat >= self.experiment.n_repeats {
                    return Err(Error::config("recorded.masks", format!("repeat {} out of range", m.repeat)));
                }
            }
        }
        Ok(s)
    }

    /// The configuration with every filter default written out.
    pub fn resolved(&self) -> Result<RunConfig> {
        let s = self.settings()?;
        let mut out = self.clone();
        out.filter = FilterConfig {
            kind: s.kind,
            ensemble_size: Some(s.ensemble_size),
            particles: Some(s.particles),
            iterations: Some(s.iterations),
            minibatch: s.minibatch,
            t_min: Some(s.t_min),
            pseudo_steps: Some(s.pseudo_steps),
            exploration_std: Some(s.exploration_std),
            exploration_decay: Some(s.exploration_decay),
            init_param_mean: Some(s.init_param_mean),
            init_param_std: Some(s.init_param_std),
            fixed_params: Some(s.fixed_params),
            prior_std: Some(s.prior_std),
            members: Some(s.members),
            inflation: Some(s.inflation),
            strict_regeneration: Some(s.strict_regeneration),
        };
        Ok(out)
    }

    pub fn recorded_masks(&self, repeat: usize) -> Option<&[ObservationMask]> {
        self.recorded
            .as_ref()?
            .masks
            .iter()
            .find(|m| m.repeat == repeat)
            .map(|m| m.masks.as_slice())
    }
}
