//! Training-free ensemble approximation of the score `grad log Q_t(z)`.
//!
//! For an ensemble `{x_m}` defining `Q_0`, the marginal score of the forward
//! process is approximated by the self-normalised kernel sum
//!
//! ```text
//! S(z, t) = sum_m -(z - alpha_t x_m) / beta_t^2 * w_m(z, t),
//! w_m ∝ N(z; alpha_t x_m, beta_t^2 I),   sum_m w_m = 1
//! ```
//!
//! and the posterior score adds a damped likelihood gradient
//! `h(t) grad log p(y | z)`.

use nalgebra::DMatrix;
use rand::seq::index;

use super::schedule::{Damping, NoiseSchedule};
use crate::ensemble::StateEnsemble;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Log-kernel level below which a query is treated as infinitely far from
/// every sample and the nearest sample receives all the weight.
const FAR_TAIL_LOG_KERNEL: f64 = -700.0;

/// Queries processed per kernel block, bounding the scratch matrix to
/// `J x QUERY_BLOCK`.
const QUERY_BLOCK: usize = 64;

/// Gradient information of `log p(y | z)` for a fixed observation `y`.
pub trait LikelihoodTerm: Send + Sync {
    fn dim(&self) -> usize;

    fn gradient(&self, z: &[f64], out: &mut [f64]);

    /// Non-negative diagonal curvature estimate of `-log p(y | z)`, used to
    /// stabilise the sampler when the likelihood is sharp. Zero means "treat
    /// the term fully explicitly".
    fn curvature(&self, _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// A score that the reverse-time sampler can integrate.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    /// Prior score for every column of `z` at pseudo-time `t`.
    fn prior_scores(&self, z: &DMatrix<f64>, t: f64, rng: &mut SimRng) -> Result<DMatrix<f64>>;

    /// Optional damped likelihood correction turning the prior score into a
    /// posterior score.
    fn likelihood(&self) -> Option<(&dyn LikelihoodTerm, Damping)> {
        None
    }
}

/// Ensemble score field backed by a [`StateEnsemble`].
pub struct ScoreField<'a> {
    ensemble: &'a StateEnsemble,
    // J x d, so that `transposed * Z` gives all inner products with one product.
    transposed: DMatrix<f64>,
    sq_norms: Vec<f64>,
    minibatch: usize,
    t_min: f64,
    likelihood: Option<&'a dyn LikelihoodTerm>,
    damping: Damping,
}

impl<'a> ScoreField<'a> {
    /// Prior score field using the full ensemble as the kernel batch.
    pub fn new(ensemble: &'a StateEnsemble, t_min: f64) -> Self {
        Self {
            transposed: ensemble.matrix().transpose(),
            sq_norms: ensemble
                .matrix()
                .column_iter()
                .map(|c| c.norm_squared())
                .collect(),
            minibatch: ensemble.count(),
            ensemble,
            t_min,
            likelihood: None,
            damping: Damping::linear(),
        }
    }

    /// Use a random mini-batch of `size` samples per evaluation (`size <= J`).
    pub fn with_minibatch(mut self, size: usize) -> Result<Self> {
        if size == 0 || size > self.ensemble.count() {
            return Err(Error::Domain(format!(
                "mini-batch size {size} must lie in 1..={}",
                self.ensemble.count()
            )));
        }
        self.minibatch = size;
        Ok(self)
    }

    /// Attach `grad log p(y | z)`, turning this into a posterior score field.
    pub fn with_likelihood(mut self, term: &'a dyn LikelihoodTerm) -> Result<Self> {
        if term.dim() != self.ensemble.dim() {
            return Err(Error::Dimension(format!(
                "likelihood of dim {} for ensemble of dim {}",
                term.dim(),
                self.ensemble.dim()
            )));
        }
        self.likelihood = Some(term);
        Ok(self)
    }

    pub fn with_damping(mut self, damping: Damping) -> Self {
        self.damping = damping;
        self
    }

    pub fn ensemble(&self) -> &StateEnsemble {
        self.ensemble
    }

    pub fn minibatch(&self) -> usize {
        self.minibatch
    }

    pub fn damping(&self) -> Damping {
        self.damping
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_min && t <= 1.0) {
            return Err(Error::Domain(format!(
                "score evaluated at pseudo-time {t}, outside [{}, 1]",
                self.t_min
            )));
        }
        Ok(())
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.ensemble.dim() {
            return Err(Error::Dimension(format!(
                "query of dim {} for ensemble of dim {}",
                z.len(),
                self.ensemble.dim()
            )));
        }
        Ok(())
    }

    /// Kernel weights of one query: the mini-batch indices and their
    /// normalised weights (summing to one).
    pub fn kernel_weights(&self, z: &[f64], t: f64, rng: &mut SimRng) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_time(t)?;
        self.check_query(z)?;
        let batch = self.draw_batch(rng);
        let z_sq: f64 = z.iter().map(|v| v * v).sum();
        let mut logits: Vec<f64> = batch
            .iter()
            .map(|&m| {
                let dot = self.ensemble.sample(m).iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                self.logit(dot, m, t)
            })
            .collect();
        normalise(&mut logits, -0.5 * z_sq / (t * t));
        Ok((batch, logits))
    }

    /// `S_prior(z, t)` for a single query.
    pub fn prior_score(&self, z: &[f64], t: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
        self.check_query(z)?;
        let zm = DMatrix::from_column_slice(z.len(), 1, z);
        Ok(self.prior_scores(&zm, t, rng)?.as_slice().to_vec())
    }

    /// `S_prior(z, t) + h(t) grad log p(y | z)`.
    pub fn posterior_score(&self, z: &[f64], t: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
        let term = self
            .likelihood
            .ok_or_else(|| Error::Domain("posterior score requires a likelihood term".into()))?;
        let mut s = self.prior_score(z, t, rng)?;
        let mut g = vec![0.0; z.len()];
        term.gradient(z, &mut g);
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "likelihood gradient coordinate {i} is non-finite at pseudo-time {t}"
            )));
        }
        let h = self.damping.at(t);
        for (si, gi) in s.iter_mut().zip(&g) {
            *si += h * gi;
        }
        Ok(s)
    }

    fn draw_batch(&self, rng: &mut SimRng) -> Vec<usize> {
        let j = self.ensemble.count();
        if self.minibatch == j {
            (0..j).collect()
        } else {
            let mut v = index::sample(rng, j, self.minibatch).into_vec();
            v.sort_unstable();
            v
        }
    }

    // log N(z; alpha x_m, beta^2 I) up to the per-query term -|z|^2 / (2 beta^2)
    #[inline]
    fn logit(&self, dot: f64, m: usize, t: f64) -> f64 {
        let a = NoiseSchedule::alpha(t);
        let b2 = t * t;
        (a * dot - 0.5 * a * a * self.sq_norms[m]) / b2
    }
}

/// In-place softmax of `logits`; `offset` is the query-dependent term dropped
/// from every logit, used only to detect far-tail queries.
fn normalise(logits: &mut [f64], offset: f64) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
    if max + offset < FAR_TAIL_LOG_KERNEL || !max.is_finite() {
        let arg = logits.iter().position(|&v| v == max).unwrap_or(0);
        logits.iter_mut().for_each(|w| *w = 0.0);
        logits[arg] = 1.0;
        return;
    }
    for w in logits.iter_mut() {
        *w = exp_nonpositive(*w - max);
    }
    let inv = 1.0 / logits.iter().sum::<f64>();
    for w in logits.iter_mut() {
        *w *= inv;
    }
}

/// `e^u` for `u <= 0`, with `u` clamped at `-700`; branch-free so the
/// softmax loop vectorises. Cody-Waite reduction `u = n ln 2 + r`,
/// `|r| <= ln 2 / 2`, then a degree-12 Taylor polynomial; relative error
/// below 1e-15.
#[inline(always)]
fn exp_nonpositive(u: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let u = if u < -700.0 { -700.0 } else { u };
    let k = u * std::f64::consts::LOG2_E + SHIFTER;
    let n = k - SHIFTER;
    let r = (u - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // the low bits of k are n in two's complement; 2^n = (n + 1023) << 52
    p * f64::from_bits(k.to_bits().wrapping_add(1023) << 52)
}

impl ScoreModel for ScoreField<'_> {
    fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    fn prior_scores(&self, z: &DMatrix<f64>, t: f64, rng: &mut SimRng) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        if z.nrows() != self.ensemble.dim() {
            return Err(Error::Dimension(format!(
                "queries of dim {} for ensemble of dim {}",
                z.nrows(),
                self.ensemble.dim()
            )));
        }
        let a = NoiseSchedule::alpha(t);
        let b2 = t * t;
        let n = z.ncols();
        let x = self.ensemble.matrix();
        let mut weighted_mean = DMatrix::zeros(x.nrows(), n);

        if self.minibatch == self.ensemble.count() {
            let (scale, shift) = (a / b2, 0.5 * a * a / b2);
            let j = self.ensemble.count();
            let width = QUERY_BLOCK.min(n);
            let mut w = DMatrix::zeros(j, width);
            let mut mean_block = DMatrix::zeros(x.nrows(), width);
            for start in (0..n).step_by(QUERY_BLOCK) {
                let cols = QUERY_BLOCK.min(n - start);
                let zb = z.columns(start, cols);
                let mut wb = w.columns_mut(0, cols);
                wb.gemm(1.0, &self.transposed, &zb, 0.0);
                for q in 0..cols {
                    let mut col = wb.column_mut(q);
                    let slice = col.as_mut_slice();
                    for (v, sq) in slice.iter_mut().zip(&self.sq_norms) {
                        *v = scale * *v - shift * sq;
                    }
                    normalise(slice, -0.5 * zb.column(q).norm_squared() / b2);
                }
                let mut mb = mean_block.columns_mut(0, cols);
                mb.gemm(1.0, x, &wb, 0.0);
                weighted_mean.columns_mut(start, cols).copy_from(&mb);
            }
        } else {
            for q in 0..n {
                let zq = z.column(q);
                let batch = self.draw_batch(rng);
                let mut logits: Vec<f64> = batch
                    .iter()
                    .map(|&m| self.logit(self.ensemble.sample(m).dot(&zq), m, t))
                    .collect();
                normalise(&mut logits, -0.5 * zq.norm_squared() / b2);
                let mut col = weighted_mean.column_mut(q);
                for (&m, &wm) in batch.iter().zip(&logits) {
                    if wm != 0.0 {
                        col.axpy(wm, &self.ensemble.sample(m), 1.0);
                    }
                }
            }
        }

        // -(z - alpha * sum_m w_m x_m) / beta^2
        let mut score = weighted_mean;
        score *= a;
        score -= z;
        score /= b2;
        Ok(score)
    }

    fn likelihood(&self) -> Option<(&dyn LikelihoodTerm, Damping)> {
        self.likelihood.map(|l| (l, self.damping))
    }
}
