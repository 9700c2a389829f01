use crate::error::{Error, Result};

/// Per-step `sqrt(mean_i (x_i - truth_i)^2)`.
pub fn compute_rmse(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} estimated steps against {} true steps",
            estimates.len(),
            truth.len()
        )));
    }
    estimates
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(n, (e, t))| {
            if e.len() != t.len() || e.is_empty() {
                return Err(Error::Input(format!(
                    "step {n}: estimate of length {} against truth of length {}",
                    e.len(),
                    t.len()
                )));
            }
            let sq: f64 = e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((sq / e.len() as f64).sqrt())
        })
        .collect()
}

/// Error metrics of one run, one row per step including the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub state_rmse: Vec<f64>,
    /// `param_abs_err[n][k] = |gamma_bar_k - gamma_k|` at step `n`.
    pub param_abs_err: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn new(states: &[Vec<f64>], truth: &[Vec<f64>], params: &[Vec<f64>], true_params: &[f64]) -> Result<Self> {
        let state_rmse = compute_rmse(states, truth)?;
        if params.len() != states.len() {
            return Err(Error::Input("parameter and state records differ in length".into()));
        }
        let param_abs_err = params
            .iter()
            .map(|p| {
                if p.len() != true_params.len() {
                    return Err(Error::Input("parameter record does not match the true parameters".into()));
                }
                Ok(p.iter().zip(true_params).map(|(a, b)| (a - b).abs()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { state_rmse, param_abs_err })
    }

    pub fn rows(&self) -> usize {
        self.state_rmse.len()
    }

    /// Metric names in output order.
    pub fn metric_names(&self) -> Vec<String> {
        let p = self.param_abs_err.first().map_or(0, Vec::len);
        std::iter::once("state_rmse".to_string())
            .chain((0..p).map(|k| format!("param_abs_err_{k}")))
            .collect()
    }

    /// Values at step `n` in the order of [`Self::metric_names`].
    pub fn row(&self, n: usize) -> Vec<f64> {
        std::iter::once(self.state_rmse[n])
            .chain(self.param_abs_err[n].iter().copied())
            .collect()
    }

    /// State RMSE averaged over the assimilation steps `1..=N`.
    pub fn time_averaged_rmse(&self) -> f64 {
        mean(&self.state_rmse[1..])
    }

    /// State RMSE averaged over the last `count` steps.
    pub fn tail_averaged_rmse(&self, count: usize) -> f64 {
        let n = self.state_rmse.len();
        mean(&self.state_rmse[n.saturating_sub(count).max(1)..])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// One aggregate row: a metric at a step across repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub step: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-step mean and spread of every metric over `tables`.
pub fn aggregate(tables: &[&MetricsTable]) -> Result<Vec<AggregateRow>> {
    let Some(first) = tables.first() else {
        return Ok(Vec::new());
    };
    if tables.iter().any(|t| t.rows() != first.rows()) {
        return Err(Error::Input("metrics tables differ in length".into()));
    }
    let names = first.metric_names();
    let mut out = Vec::with_capacity(first.rows() * names.len());
    for step in 0..first.rows() {
        let rows: Vec<Vec<f64>> = tables.iter().map(|t| t.row(step)).collect();
        for (k, name) in names.iter().enumerate() {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let (mean, std) = mean_std(&col);
            out.push(AggregateRow {
                step,
                metric: name.clone(),
                mean,
                std,
                n: col.len(),
            });
        }
    }
    Ok(out)
}
