//! Divergences between a teacher distribution `p` and a student distribution `q`.
//!
//! Everything here works on small dense probability vectors in `f64`. The
//! α-divergence family interpolates forward KL (α → 1) and reverse KL (α → 0):
//!
//! ```text
//! D_α(p || q) = 1 / (α(α−1)) · Σᵢ qᵢ [ (pᵢ/qᵢ)^α − 1 ]
//! ```
//!
//! Negative α punishes a student that spreads mass where the teacher has
//! none (over-estimated uncertainty); positive α punishes a student that
//! collapses onto too few classes (under-estimated uncertainty). The adaptive
//! objective takes the larger of one negative and one positive member.
//!
//! Infinite divergences are reported as `f64::INFINITY`.

mod fcheck;
mod grad;

pub use fcheck::{log_grid, rho_star, verify_f_divergence, verify_f_divergence_with, FDivergenceReport, ReconstructedF};
pub use grad::{
    adaptive_kd_grad, alpha_kd_grad_logits, importance_weights, kd_objective, kl_grad_logits,
    reverse_kl_grad_logits, KdEval,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Half-width of the band around α = 0 and α = 1 where the closed-form
/// reverse KL / KL replaces the α-divergence formula.
pub const ALPHA_LIMIT_BAND: f64 = 1e-4;

/// Absolute tolerance on the total mass of a [`ProbDist`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Student probabilities are floored at this value before forming density ratios.
pub const STUDENT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("distribution is empty")]
    Empty,
    #[error("probability {value} at index {index} is negative or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("logit at index {index} is not finite ({value})")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("alpha must be non-zero for this operation")]
    ZeroAlpha,
    #[error("clip factor must be >= 1, got {0}")]
    InvalidClip(f64),
    #[error("density ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("operation requires divergence kind {expected}, got {actual}")]
    WrongKind { expected: DivergenceKind, actual: DivergenceKind },
    #[error("invalid divergence spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = DivergenceError> = std::result::Result<T, E>;

/// A normalized discrete distribution over `m` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DivergenceError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DivergenceError::InvalidProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(DivergenceError::NotNormalized { sum });
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `m` classes.
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(DivergenceError::Empty);
        }
        Ok(Self(vec![1.0 / m as f64; m]))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Pre-softmax scores. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(DivergenceError::Empty);
        }
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DivergenceError::NonFiniteLogit { index, value });
        }
        Ok(Self(logits))
    }

    pub fn logits(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "reverse-kl")]
    ReverseKl,
    #[serde(rename = "symmetric-kl")]
    SymmetricKl,
    /// A single α-divergence; α is taken from `alpha_plus`.
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "adaptive-alpha")]
    AdaptiveAlpha,
}

impl DivergenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::ReverseKl => "reverse-kl",
            DivergenceKind::SymmetricKl => "symmetric-kl",
            DivergenceKind::Alpha => "alpha",
            DivergenceKind::AdaptiveAlpha => "adaptive-alpha",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DivergenceKind {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "reverse-kl" | "reverse_kl" | "rkl" => Ok(DivergenceKind::ReverseKl),
            "symmetric-kl" | "symmetric_kl" | "skl" => Ok(DivergenceKind::SymmetricKl),
            "alpha" => Ok(DivergenceKind::Alpha),
            "adaptive-alpha" | "adaptive_alpha" | "adaptive" => Ok(DivergenceKind::AdaptiveAlpha),
            other => Err(DivergenceError::InvalidSpec(format!("unknown divergence kind '{other}'"))),
        }
    }
}

/// Which divergence drives distillation, and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    /// Cap β on the powered density ratio in gradients. `f64::INFINITY` disables clipping.
    pub clip_factor: f64,
    pub temperature: f64,
    /// Mixing weight between the label loss and the KD loss in single-network distillation.
    pub distill_weight: f64,
    /// γ, the weight of the KD term in supernet training.
    pub kd_weight: f64,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::AdaptiveAlpha,
            alpha_minus: -1.0,
            alpha_plus: 1.0,
            clip_factor: 5.0,
            temperature: 1.0,
            distill_weight: 0.9,
            kd_weight: 3.0,
        }
    }
}

impl DivergenceSpec {
    pub fn with_kind(kind: DivergenceKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DivergenceError::InvalidTemperature(self.temperature));
        }
        if self.clip_factor.is_nan() || self.clip_factor < 1.0 {
            return Err(DivergenceError::InvalidClip(self.clip_factor));
        }
        if !(0.0..=1.0).contains(&self.distill_weight) {
            return Err(DivergenceError::InvalidSpec(format!(
                "distill_weight must lie in [0, 1], got {}",
                self.distill_weight
            )));
        }
        if !(self.kd_weight.is_finite() && self.kd_weight >= 0.0) {
            return Err(DivergenceError::InvalidSpec(format!(
                "kd_weight must be finite and >= 0, got {}",
                self.kd_weight
            )));
        }
        if !(self.alpha_minus.is_finite() && self.alpha_plus.is_finite()) {
            return Err(DivergenceError::InvalidSpec("alpha values must be finite".into()));
        }
        match self.kind {
            DivergenceKind::AdaptiveAlpha if !(self.alpha_minus < 0.0 && self.alpha_plus > 0.0) => {
                Err(DivergenceError::InvalidSpec(format!(
                    "adaptive-alpha needs alpha_minus < 0 < alpha_plus, got ({}, {})",
                    self.alpha_minus, self.alpha_plus
                )))
            }
            DivergenceKind::Alpha if self.alpha_plus == 0.0 => Err(DivergenceError::ZeroAlpha),
            _ => Ok(()),
        }
    }
}

/// Which member of the adaptive pair produced the larger divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// α₋, penalizing over-estimated uncertainty.
    Minus,
    /// α₊, penalizing under-estimated uncertainty.
    Plus,
}

/// `softmax(z / T)` with max-subtraction.
pub fn softmax_with_temperature(logits: &LogitVec, temperature: f64) -> Result<ProbDist> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DivergenceError::InvalidTemperature(temperature));
    }
    Ok(ProbDist(softmax_slice(logits.logits(), temperature)))
}

/// Unchecked softmax over a raw slice; callers guarantee finite input and `T > 0`.
pub(crate) fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn check_lengths(p: &ProbDist, q: &ProbDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(DivergenceError::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(())
}

/// `Σ aᵢ log(aᵢ/bᵢ)` with `0·log(0/b) = 0` and `+∞` when some `aᵢ > 0 = bᵢ`.
fn kl_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        if ai == 0.0 {
            continue;
        }
        if bi == 0.0 {
            return f64::INFINITY;
        }
        total += ai * (ai / bi).ln();
    }
    total
}

/// Forward KL, `KL(p || q)`. Infinite when q misses teacher mass (zero-avoiding).
pub fn kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(kl_raw(p.probs(), q.probs()))
}

/// Reverse KL, `KL(q || p)`. Infinite when q puts mass where p has none (zero-forcing).
pub fn reverse_kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(kl_raw(q.probs(), p.probs()))
}

pub fn symmetric_kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    Ok(kl(p, q)? + reverse_kl(p, q)?)
}

/// `D_α(p || q)` for any real α, switching to KL / reverse KL inside the limit bands.
pub fn alpha_divergence(p: &ProbDist, q: &ProbDist, alpha: f64) -> Result<f64> {
    check_lengths(p, q)?;
    if (alpha - 1.0).abs() <= ALPHA_LIMIT_BAND {
        return kl(p, q);
    }
    if alpha.abs() <= ALPHA_LIMIT_BAND {
        return reverse_kl(p, q);
    }
    let scale = 1.0 / (alpha * (alpha - 1.0));
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let term = if qi == 0.0 {
            // q·(p/q)^α = p^α q^(1−α): vanishes for α < 1 and blows up for α > 1 when p > 0.
            if pi == 0.0 || alpha < 1.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else if pi == 0.0 {
            if alpha > 0.0 {
                -qi
            } else {
                f64::INFINITY
            }
        } else {
            qi * ((pi / qi).powf(alpha) - 1.0)
        };
        total += term;
    }
    Ok(scale * total)
}

/// `max(D_{α₋}, D_{α₊})` and the winning branch. Ties go to [`Branch::Plus`].
pub fn adaptive_alpha_divergence(p: &ProbDist, q: &ProbDist, spec: &DivergenceSpec) -> Result<(f64, Branch)> {
    if spec.kind != DivergenceKind::AdaptiveAlpha {
        return Err(DivergenceError::WrongKind {
            expected: DivergenceKind::AdaptiveAlpha,
            actual: spec.kind,
        });
    }
    let minus = alpha_divergence(p, q, spec.alpha_minus)?;
    let plus = alpha_divergence(p, q, spec.alpha_plus)?;
    Ok(if minus > plus { (minus, Branch::Minus) } else { (plus, Branch::Plus) })
}

/// Forward value of whatever divergence `spec` selects, on already-softened distributions.
pub fn divergence_value(p: &ProbDist, q: &ProbDist, spec: &DivergenceSpec) -> Result<(f64, Option<Branch>)> {
    match spec.kind {
        DivergenceKind::Kl => Ok((kl(p, q)?, None)),
        DivergenceKind::ReverseKl => Ok((reverse_kl(p, q)?, None)),
        DivergenceKind::SymmetricKl => Ok((symmetric_kl(p, q)?, None)),
        DivergenceKind::Alpha => Ok((alpha_divergence(p, q, spec.alpha_plus)?, None)),
        DivergenceKind::AdaptiveAlpha => {
            let (v, b) = adaptive_alpha_divergence(p, q, spec)?;
            Ok((v, Some(b)))
        }
    }
}

/// α values swept by [`alpha_sweep`]: −1.0, −0.9, …, 1.0.
pub fn sweep_alphas() -> Vec<f64> {
    (-10..=10).map(|k| k as f64 / 10.0).collect()
}

/// `D_α(p || q)` for each α in `alphas`.
pub fn alpha_sweep(p: &ProbDist, q: &ProbDist, alphas: &[f64]) -> Result<Vec<f64>> {
    alphas.iter().map(|&a| alpha_divergence(p, q, a)).collect()
}

/// Two canonical teacher/student pairs used for the α-sweep demo.
pub mod scenarios {
    use super::ProbDist;

    /// Student collapses onto the teacher's top class and misses its secondary modes.
    pub fn under_estimating() -> (ProbDist, ProbDist) {
        (
            ProbDist(vec![0.5, 0.3, 0.1, 0.1]),
            ProbDist(vec![0.97, 0.01, 0.01, 0.01]),
        )
    }

    /// Student is much flatter than a confident teacher.
    pub fn over_estimating() -> (ProbDist, ProbDist) {
        (
            ProbDist(vec![0.9, 0.04, 0.03, 0.03]),
            ProbDist(vec![0.3, 0.25, 0.25, 0.2]),
        )
    }
}

/// Write the α-sweep CSV (`alpha,divergence_example1,divergence_example2`).
///
/// Example 1 is the under-estimating student, example 2 the over-estimating one.
pub fn write_alpha_sweep_csv<W: std::io::Write>(out: W) -> Result<(), csv::Error> {
    let (p1, q1) = scenarios::under_estimating();
    let (p2, q2) = scenarios::over_estimating();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "divergence_example1", "divergence_example2"])?;
    for a in sweep_alphas() {
        // The scenario distributions are strictly positive, so these never fail.
        let d1 = alpha_divergence(&p1, &q1, a).expect("valid scenario");
        let d2 = alpha_divergence(&p2, &q2, a).expect("valid scenario");
        w.write_record([format!("{a:.1}"), format!("{d1:.17e}"), format!("{d2:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}
