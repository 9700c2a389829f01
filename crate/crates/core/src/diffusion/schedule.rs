use crate::error::{Error, Result};

/// Linear noise schedule `alpha(t) = 1 - t`, `beta(t) = t` on pseudo-time `[0, 1]`.
///
/// The forward process maps a target distribution at `t = 0` to `N(0, I)` at
/// `t = 1` with `Z_t | Z_0 ~ N(alpha(t) Z_0, beta(t)^2 I)`. Its drift and
/// diffusion coefficients are `b(t) = d log alpha / dt` and
/// `sigma^2(t) = d beta^2 / dt - 2 b(t) beta^2`, both singular at `t = 1`, so the
/// reverse sampler integrates on `[t_min, 1 - t_min]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    t_min: f64,
    n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 1e-3,
            n_steps: 100,
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64, n_steps: usize) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 0.5) {
            return Err(Error::Domain(format!("t_min must lie in (0, 0.5), got {t_min}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        Ok(Self { t_min, n_steps })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    pub fn beta(t: f64) -> f64 {
        t
    }

    /// `(alpha(t), beta(t))`, defined for `t` in `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("pseudo-time {t} outside [0, 1]")));
        }
        Ok((Self::alpha(t), Self::beta(t)))
    }

    /// `b(t) = d log alpha / dt = -1 / (1 - t)`.
    pub fn drift(t: f64) -> f64 {
        -1.0 / (1.0 - t)
    }

    /// `sigma^2(t) = 2 t + 2 t^2 / (1 - t)`.
    pub fn diffusion_sq(t: f64) -> f64 {
        2.0 * t + 2.0 * t * t / (1.0 - t)
    }

    /// Backward integration intervals `(t_start, t_end, t_eval)` from
    /// `1 - t_min` down to `t_min`; coefficients are evaluated at the midpoint.
    pub fn reverse_steps(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let hi = 1.0 - self.t_min;
        let lo = self.t_min;
        let n = self.n_steps as f64;
        (0..self.n_steps).map(move |k| {
            let a = hi - (hi - lo) * (k as f64) / n;
            let b = if k + 1 == self.n_steps {
                lo
            } else {
                hi - (hi - lo) * ((k + 1) as f64) / n
            };
            (a, b, 0.5 * (a + b))
        })
    }
}

/// Damping `h(t)` applied to the likelihood term of the posterior score:
/// `h(0) = 1`, `h(1) = 0`, non-increasing in between.
#[derive(Clone, Copy)]
pub struct Damping(pub fn(f64) -> f64);

impl Damping {
    /// `h(t) = 1 - t`.
    pub fn linear() -> Self {
        Damping(|t| 1.0 - t)
    }

    pub fn at(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

impl Default for Damping {
    fn default() -> Self {
        Self::linear()
    }
}

impl std::fmt::Debug for Damping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Damping(h(0)={}, h(1)={})", self.at(0.0), self.at(1.0))
    }
}
