//! Closed-form diffusion math: the variance schedule, forward noising and
//! single reverse steps.
//!
//! Timesteps are 1-based (`1..=T`). Index 0 is the clean-data endpoint where
//! `alpha_bar[0] == 1`, which lets reverse loops and known-region re-noising
//! land exactly on clean values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Beta bounds of the reference 1000-step linear schedule.
pub const REFERENCE_BETA_MIN: f64 = 1e-4;
pub const REFERENCE_BETA_MAX: f64 = 0.02;
pub const REFERENCE_STEPS: usize = 1000;

/// Noise scale used for the stochastic term of a DDPM reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Beta,
    /// `sigma_t = sqrt(beta_t (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]))`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    variance: VarianceKind,
    // All vectors have length T + 1; entry 0 is the clean endpoint.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_min` at t = 1 to `beta_max` at t = T.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::linear_with_variance(steps, beta_min, beta_max, VarianceKind::Beta)
    }

    pub fn linear_with_variance(
        steps: usize,
        beta_min: f64,
        beta_max: f64,
        variance: VarianceKind,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            beta.push(beta_min + (beta_max - beta_min) * frac);
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut prod = 1.0f64;
        alpha_bar.push(prod);
        for &b in &beta[1..] {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let mut sigma = Vec::with_capacity(steps + 1);
        sigma.push(0.0);
        for t in 1..=steps {
            let var = match variance {
                VarianceKind::Beta => beta[t],
                VarianceKind::Posterior => {
                    beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
                }
            };
            sigma.push(var.sqrt());
        }
        Ok(Self {
            steps,
            beta_min,
            beta_max,
            variance,
            beta,
            alpha_bar,
            sigma,
        })
    }

    /// The 1000-step schedule with the standard DDPM bounds.
    pub fn reference() -> Self {
        Self::linear(REFERENCE_STEPS, REFERENCE_BETA_MIN, REFERENCE_BETA_MAX)
            .expect("reference bounds are valid")
    }

    /// A `steps`-long linear schedule whose endpoints are the reference
    /// bounds scaled by a common factor chosen so that `alpha_bar[steps]`
    /// equals `alpha_bar[1000]` of the reference schedule.
    pub fn linear_matched(steps: usize, variance: VarianceKind) -> Result<Self> {
        let target = Self::reference().alpha_bar(REFERENCE_STEPS).ln();
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        let log_ab = |scale: f64| -> f64 {
            (1..=steps)
                .map(|t| {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        (t - 1) as f64 / (steps - 1) as f64
                    };
                    let b = scale * (REFERENCE_BETA_MIN + (REFERENCE_BETA_MAX - REFERENCE_BETA_MIN) * frac);
                    (1.0 - b).ln()
                })
                .sum()
        };
        // log alpha_bar decreases monotonically in the scale factor.
        let mut lo = 0.0f64;
        let mut hi = (1.0 - 1e-9) / REFERENCE_BETA_MAX;
        if log_ab(hi) > target {
            return Err(Error::Config(format!(
                "{steps} steps cannot reach the reference terminal noise level"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if log_ab(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let scale = 0.5 * (lo + hi);
        Self::linear_with_variance(
            steps,
            scale * REFERENCE_BETA_MIN,
            scale * REFERENCE_BETA_MAX,
            variance,
        )
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn variance(&self) -> VarianceKind {
        self.variance
    }

    /// `beta[t]` for `t` in `1..=T`; 0 at the clean endpoint.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps {
            return Err(Error::Contract(format!(
                "timestep {t} outside [{lo}, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`. `t = 0` returns `x0`.
pub fn forward_noise(x0: &Plane, t: usize, eps: &Plane, sched: &NoiseSchedule) -> Result<Plane> {
    sched.check_t(t, true)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral DDPM reverse step from level `t` to `t - 1`.
///
/// `z` is the fresh Gaussian noise for the stochastic term and must be all
/// zeros at `t = 1`.
pub fn ddpm_step(
    x_t: &Plane,
    eps_hat: &Plane,
    t: usize,
    z: &Plane,
    sched: &NoiseSchedule,
) -> Result<Plane> {
    sched.check_t(t, false)?;
    x_t.ensure_same_shape(eps_hat)?;
    x_t.ensure_same_shape(z)?;
    if t == 1 && z.as_slice().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("the final reverse step takes z = 0".into()));
    }
    let alpha = sched.alpha(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .zip(z.as_slice())
        .map(|((&x, &e), &n)| {
            inv_sqrt_alpha * (x - eps_coef * e) + sigma * n
        })
        .collect();
    Plane::from_vec(x_t.height(), x_t.width(), data)
}

/// Deterministic (eta = 0) DDIM step from level `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Plane,
    eps_hat: &Plane,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Plane> {
    sched.check_t(t, false)?;
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "DDIM needs t_prev < t, got t = {t}, t_prev = {t_prev}"
        )));
    }
    x_t.ensure_same_shape(eps_hat)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(eps_hat, |x, e| {
        let x0_hat = (x - sb * e) / sa;
        pa * x0_hat + pb * e
    })
}

/// Uniformly spaced descending timesteps `round((n - i) * T / n)` for
/// `i = 0..=n`; the list starts at `T` and ends at the clean endpoint 0.
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "DDIM step count must lie in [1, {total}], got {n}"
        )));
    }
    Ok((0..=n)
        .map(|i| ((n - i) as f64 * total as f64 / n as f64).round() as usize)
        .collect())
}
