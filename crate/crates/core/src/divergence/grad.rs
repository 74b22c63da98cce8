//! Gradients of the divergences with respect to student logits.
//!
//! The teacher distribution is a constant throughout: nothing here
//! differentiates through `p`.

use super::{
    adaptive_alpha_divergence, check_lengths, divergence_value, softmax_slice, Branch, DivergenceError,
    DivergenceKind, DivergenceSpec, LogitVec, ProbDist, Result, ALPHA_LIMIT_BAND, STUDENT_PROB_FLOOR,
};

/// `wᵢ = min((pᵢ / max(qᵢ, floor))^α, β)`.
pub fn importance_weights(p: &ProbDist, q: &ProbDist, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_lengths(p, q)?;
    Ok(weights_raw(p.probs(), q.probs(), alpha, beta))
}

fn weights_raw(p: &[f64], q: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| (pi / qi.max(STUDENT_PROB_FLOOR)).powf(alpha).min(beta))
        .collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(DivergenceError::InvalidTemperature(t));
    }
    Ok(())
}

fn check_student(p: &ProbDist, logits: &LogitVec) -> Result<()> {
    if p.len() != logits.len() {
        return Err(DivergenceError::LengthMismatch { left: p.len(), right: logits.len() });
    }
    Ok(())
}

/// Clipped α-divergence gradient with respect to the student logits.
///
/// With `q = softmax(z/T)` and `wᵢ = min((pᵢ/qᵢ)^α, β)`:
///
/// ```text
/// ∂/∂zⱼ = −1/(αT) · (qⱼwⱼ − qⱼ Σᵢ qᵢwᵢ)
/// ```
///
/// `beta = f64::INFINITY` gives the exact gradient of [`super::alpha_divergence`].
pub fn alpha_kd_grad_logits(
    p: &ProbDist,
    student_logits: &LogitVec,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<Vec<f64>> {
    if alpha == 0.0 {
        return Err(DivergenceError::ZeroAlpha);
    }
    if beta.is_nan() || beta < 1.0 {
        return Err(DivergenceError::InvalidClip(beta));
    }
    check_temperature(temperature)?;
    check_student(p, student_logits)?;
    let q = softmax_slice(student_logits.logits(), temperature);
    Ok(alpha_grad_raw(p.probs(), &q, alpha, beta, temperature))
}

fn alpha_grad_raw(p: &[f64], q: &[f64], alpha: f64, beta: f64, temperature: f64) -> Vec<f64> {
    let w = weights_raw(p, q, alpha, beta);
    let mean: f64 = q.iter().zip(&w).map(|(qi, wi)| qi * wi).sum();
    let scale = -1.0 / (alpha * temperature);
    q.iter().zip(&w).map(|(&qj, &wj)| scale * (qj * wj - qj * mean)).collect()
}

/// Gradient of `KL(p || softmax(z/T))`: `(q − p) / T`.
pub fn kl_grad_logits(p: &ProbDist, student_logits: &LogitVec, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_student(p, student_logits)?;
    let q = softmax_slice(student_logits.logits(), temperature);
    Ok(kl_grad_raw(p.probs(), &q, temperature))
}

fn kl_grad_raw(p: &[f64], q: &[f64], temperature: f64) -> Vec<f64> {
    q.iter().zip(p).map(|(qi, pi)| (qi - pi) / temperature).collect()
}

/// Gradient of `KL(softmax(z/T) || p)`.
///
/// Zero teacher entries make the true gradient infinite; they are floored at
/// [`STUDENT_PROB_FLOOR`] inside the logarithm so the result stays finite.
pub fn reverse_kl_grad_logits(p: &ProbDist, student_logits: &LogitVec, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_student(p, student_logits)?;
    let z = student_logits.logits();
    let q = softmax_slice(z, temperature);
    Ok(reverse_kl_grad_raw(p.probs(), z, &q, temperature))
}

fn reverse_kl_grad_raw(p: &[f64], z: &[f64], q: &[f64], temperature: f64) -> Vec<f64> {
    // log q from the logits directly so underflowed probabilities stay finite.
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = z.iter().map(|&zi| ((zi - max) / temperature).exp()).sum::<f64>().ln();
    let log_ratio: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(&zi, &pi)| (zi - max) / temperature - log_norm - pi.max(STUDENT_PROB_FLOOR).ln())
        .collect();
    let mean: f64 = q.iter().zip(&log_ratio).map(|(qi, li)| qi * li).sum();
    q.iter()
        .zip(&log_ratio)
        .map(|(&qj, &lj)| qj * (lj - mean) / temperature)
        .collect()
}

/// Single-α gradient that falls back to the reverse-KL limit near α = 0.
fn single_alpha_grad(p: &[f64], z: &[f64], q: &[f64], alpha: f64, beta: f64, temperature: f64) -> Vec<f64> {
    if alpha.abs() <= ALPHA_LIMIT_BAND {
        reverse_kl_grad_raw(p, z, q, temperature)
    } else {
        alpha_grad_raw(p, q, alpha, beta, temperature)
    }
}

/// Adaptive-KD gradient: the branch is chosen on unclipped forward values,
/// then the winning α's clipped gradient is returned.
pub fn adaptive_kd_grad(p: &ProbDist, student_logits: &LogitVec, spec: &DivergenceSpec) -> Result<Vec<f64>> {
    Ok(adaptive_eval(p, student_logits, spec)?.grad)
}

fn adaptive_eval(p: &ProbDist, student_logits: &LogitVec, spec: &DivergenceSpec) -> Result<KdEval> {
    if spec.kind != DivergenceKind::AdaptiveAlpha {
        return Err(DivergenceError::WrongKind {
            expected: DivergenceKind::AdaptiveAlpha,
            actual: spec.kind,
        });
    }
    check_temperature(spec.temperature)?;
    check_student(p, student_logits)?;
    let z = student_logits.logits();
    let q = softmax_slice(z, spec.temperature);
    let (value, branch) = adaptive_alpha_divergence(p, &ProbDist(q.clone()), spec)?;
    let alpha = match branch {
        Branch::Minus => spec.alpha_minus,
        Branch::Plus => spec.alpha_plus,
    };
    let grad = single_alpha_grad(p.probs(), z, &q, alpha, spec.clip_factor, spec.temperature);
    Ok(KdEval { value, grad, branch: Some(branch) })
}

/// Forward value and logit gradient of one teacher/student pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KdEval {
    /// Unclipped divergence between `p` and `softmax(z/T)`.
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set for adaptive-α only.
    pub branch: Option<Branch>,
}

/// Divergence and gradient for whatever `spec.kind` selects.
///
/// `p` must already be the temperature-softened teacher distribution.
/// Clipping applies to the α kinds only; the KL family is never clipped.
pub fn kd_objective(p: &ProbDist, student_logits: &LogitVec, spec: &DivergenceSpec) -> Result<KdEval> {
    if spec.kind == DivergenceKind::AdaptiveAlpha {
        return adaptive_eval(p, student_logits, spec);
    }
    check_temperature(spec.temperature)?;
    check_student(p, student_logits)?;
    let t = spec.temperature;
    let z = student_logits.logits();
    let q = softmax_slice(z, t);
    let grad = match spec.kind {
        DivergenceKind::Kl => kl_grad_raw(p.probs(), &q, t),
        DivergenceKind::ReverseKl => reverse_kl_grad_raw(p.probs(), z, &q, t),
        DivergenceKind::SymmetricKl => kl_grad_raw(p.probs(), &q, t)
            .into_iter()
            .zip(reverse_kl_grad_raw(p.probs(), z, &q, t))
            .map(|(a, b)| a + b)
            .collect(),
        DivergenceKind::Alpha => single_alpha_grad(p.probs(), z, &q, spec.alpha_plus, spec.clip_factor, t),
        DivergenceKind::AdaptiveAlpha => unreachable!(),
    };
    let (value, branch) = divergence_value(p, &ProbDist(q), spec)?;
    Ok(KdEval { value, grad, branch })
}
