//! Noise schedules, forward diffusion, the epsilon-prediction loss, and the
//! deterministic DDIM reverse step.
//!
//! Time indices run `t = 0..=T` with `alpha_bar[0] = 1` (clean data). All
//! operations are pure; schedule constants are computed in `f64` and then
//! narrowed to the working scalar type.

use crate::num::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("step count {0} outside supported range [2, 10000]")]
    BadStepCount(usize),
    #[error("beta range ({start}, {end}) violates 0 < start <= end < 1")]
    BadBetaRange { start: f64, end: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("tensor shapes differ: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("timestep order requires t_prev < t, got t_prev={t_prev}, t={t}")]
    BadStepOrder { t: usize, t_prev: usize },
}

/// Discrete noise schedule: per-step rates `beta`, cumulative products
/// `alpha_bar`, and the noise magnitudes `sigma = sqrt(1 - alpha_bar)`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    t_max: usize,
    beta: Vec<T>,
    alpha_bar: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear beta schedule from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if !(2..=10_000).contains(&t_max) {
            return Err(ScheduleError::BadStepCount(t_max));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::BadBetaRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let mut beta = Vec::with_capacity(t_max + 1);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        // Index 0 is the clean-data endpoint; beta[0] is unused padding.
        beta.push(T::zero());
        alpha_bar.push(T::one());
        sigma.push(T::zero());
        let mut prod = 1.0f64;
        for t in 1..=t_max {
            let frac = (t - 1) as f64 / (t_max - 1) as f64;
            let b = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - b;
            beta.push(T::from_f64_lossy(b));
            alpha_bar.push(T::from_f64_lossy(prod));
            sigma.push(T::from_f64_lossy((1.0 - prod).sqrt()));
        }
        Ok(Self {
            t_max,
            beta,
            alpha_bar,
            sigma,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigma[t]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<(), DiffusionError> {
        if t < lo || t > self.t_max {
            return Err(DiffusionError::TimeOutOfRange {
                t,
                lo,
                hi: self.t_max,
            });
        }
        Ok(())
    }
}

fn check_shapes<T>(a: &[T], b: &[T]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`, elementwise.
pub fn forward_diffuse<T: Scalar>(
    x0: &[T],
    t: usize,
    eps: &[T],
    sched: &NoiseSchedule<T>,
) -> Result<Vec<T>, DiffusionError> {
    check_shapes(x0, eps)?;
    sched.check_t(t, 0)?;
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.sigma(t);
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| a * x + s * e)
        .collect())
}

/// Mean squared error between true and predicted noise.
pub fn simple_loss<T: Scalar>(eps_true: &[T], eps_pred: &[T]) -> Result<T, DiffusionError> {
    check_shapes(eps_true, eps_pred)?;
    let n = T::from_f64_lossy(eps_true.len() as f64);
    let sum: T = eps_true
        .iter()
        .zip(eps_pred)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Invert the forward map: `(x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
///
/// The raw value is returned unclamped; callers that need a display copy
/// clamp separately.
pub fn predict_x0<T: Scalar>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<Vec<T>, DiffusionError> {
    check_shapes(x_t, eps_hat)?;
    sched.check_t(t, 1)?;
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.sigma(t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| (x - s * e) / a)
        .collect())
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step<T: Scalar>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule<T>,
) -> Result<Vec<T>, DiffusionError> {
    if t_prev >= t {
        return Err(DiffusionError::BadStepOrder { t, t_prev });
    }
    sched.check_t(t, 1)?;
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    let a_prev = sched.alpha_bar(t_prev).sqrt();
    let s_prev = sched.sigma(t_prev);
    Ok(x0
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| a_prev * x + s_prev * e)
        .collect())
}

/// Uniformly strided timestep ladder `T = t_0 > t_1 > ... > t_steps = 0`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_max, "steps must lie in [1, t_max]");
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| ((t_max as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}
