//! Guidance algebra for multi-view diffusion sampling.
//!
//! Two combiners operate on the four conditioning branches of the denoiser:
//!
//! * [`cfg_combine`] — joint classifier-free guidance with a single scale
//!   `s` applied to the full condition against the unconditional branch.
//! * [`harmony_combine`] — the decomposed form with a consistency scale
//!   `s1` (full vs. multi-view-only) and a diversity scale `s2` (full vs.
//!   reference-only).
//!
//! The implicit-classifier scores behind the decomposition are exposed as
//! [`implicit_score_ref`] and [`implicit_score_mv`]; scaling them by
//! `sigma_t` and subtracting from the full branch reproduces
//! `harmony_combine` exactly.

use crate::num::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("branch tensors must share one shape, got {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("guidance scale must be finite")]
    NonFiniteScale,
    #[error("sigma_t must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("mode {mode:?} requires scale field `{field}`")]
    MissingScale { mode: GuidanceMode, field: &'static str },
    #[error("scale `{field}` = {value} is negative; configurations require scales >= 0")]
    NegativeScale { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Baseline,
    Harmony,
}

/// Validated guidance configuration.
///
/// Negative scales are rejected here, at parse time; the raw combiner
/// functions still accept them so algebraic properties can be probed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub s: Option<f64>,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self {
            mode: GuidanceMode::None,
            s: None,
            s1: None,
            s2: None,
        }
    }

    pub fn baseline(s: f64) -> Self {
        Self {
            mode: GuidanceMode::Baseline,
            s: Some(s),
            s1: None,
            s2: None,
        }
    }

    pub fn harmony(s1: f64, s2: f64) -> Self {
        Self {
            mode: GuidanceMode::Harmony,
            s: None,
            s1: Some(s1),
            s2: Some(s2),
        }
    }

    /// Check mode/scale consistency and non-negativity.
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let need = |v: Option<f64>, field: &'static str| -> Result<f64, GuidanceError> {
            v.ok_or(GuidanceError::MissingScale {
                mode: self.mode,
                field,
            })
        };
        let non_negative = |value: f64, field: &'static str| -> Result<(), GuidanceError> {
            if !value.is_finite() {
                return Err(GuidanceError::NonFiniteScale);
            }
            if value < 0.0 {
                return Err(GuidanceError::NegativeScale { field, value });
            }
            Ok(())
        };
        match self.mode {
            GuidanceMode::None => Ok(()),
            GuidanceMode::Baseline => non_negative(need(self.s, "s")?, "s"),
            GuidanceMode::Harmony => {
                non_negative(need(self.s1, "s1")?, "s1")?;
                non_negative(need(self.s2, "s2")?, "s2")
            }
        }
    }
}

/// The four conditioning branches evaluated at one `(view, timestep)`.
///
/// `eps_full` carries the full condition (reference and multi-view context),
/// `eps_mv` the multi-view context only, `eps_ref` the reference only, and
/// `eps_uncond` no condition at all.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs<T> {
    pub eps_full: Vec<T>,
    pub eps_mv: Vec<T>,
    pub eps_ref: Vec<T>,
    pub eps_uncond: Vec<T>,
}

impl<T: Scalar> BranchOutputs<T> {
    pub fn new(
        eps_full: Vec<T>,
        eps_mv: Vec<T>,
        eps_ref: Vec<T>,
        eps_uncond: Vec<T>,
    ) -> Result<Self, GuidanceError> {
        for other in [&eps_mv, &eps_ref, &eps_uncond] {
            if other.len() != eps_full.len() {
                return Err(GuidanceError::ShapeMismatch(eps_full.len(), other.len()));
            }
        }
        Ok(Self {
            eps_full,
            eps_mv,
            eps_ref,
            eps_uncond,
        })
    }
}

fn check_shapes<T>(a: &[T], b: &[T]) -> Result<(), GuidanceError> {
    if a.len() != b.len() {
        return Err(GuidanceError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn check_scale<T: Scalar>(s: T) -> Result<(), GuidanceError> {
    if !s.is_finite() {
        return Err(GuidanceError::NonFiniteScale);
    }
    Ok(())
}

/// `eps_cond + s * (eps_cond - eps_uncond)`, elementwise.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &[T],
    eps_uncond: &[T],
    s: T,
) -> Result<Vec<T>, GuidanceError> {
    check_shapes(eps_cond, eps_uncond)?;
    check_scale(s)?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| c + s * (c - u))
        .collect())
}

/// `eps_full + s1 * (eps_full - eps_mv) + s2 * (eps_full - eps_ref)`, elementwise.
pub fn harmony_combine<T: Scalar>(
    b: &BranchOutputs<T>,
    s1: T,
    s2: T,
) -> Result<Vec<T>, GuidanceError> {
    check_shapes(&b.eps_full, &b.eps_mv)?;
    check_shapes(&b.eps_full, &b.eps_ref)?;
    check_scale(s1)?;
    check_scale(s2)?;
    Ok(b.eps_full
        .iter()
        .zip(&b.eps_mv)
        .zip(&b.eps_ref)
        .map(|((&f, &m), &r)| f + s1 * (f - m) + s2 * (f - r))
        .collect())
}

/// Score of the implicit classifier for the reference condition:
/// `-(1/sigma_t) * (eps_full - eps_mv)`.
pub fn implicit_score_ref<T: Scalar>(
    b: &BranchOutputs<T>,
    sigma_t: T,
) -> Result<Vec<T>, GuidanceError> {
    if sigma_t <= T::zero() {
        return Err(GuidanceError::NonPositiveSigma(sigma_t.as_f64()));
    }
    check_shapes(&b.eps_full, &b.eps_mv)?;
    let inv = -T::one() / sigma_t;
    Ok(b.eps_full
        .iter()
        .zip(&b.eps_mv)
        .map(|(&f, &m)| inv * (f - m))
        .collect())
}

/// Score of the implicit classifier for the multi-view condition:
/// `-(1/sigma_t) * (eps_full - eps_ref)`.
pub fn implicit_score_mv<T: Scalar>(
    b: &BranchOutputs<T>,
    sigma_t: T,
) -> Result<Vec<T>, GuidanceError> {
    if sigma_t <= T::zero() {
        return Err(GuidanceError::NonPositiveSigma(sigma_t.as_f64()));
    }
    check_shapes(&b.eps_full, &b.eps_ref)?;
    let inv = -T::one() / sigma_t;
    Ok(b.eps_full
        .iter()
        .zip(&b.eps_ref)
        .map(|(&f, &r)| inv * (f - r))
        .collect())
}
