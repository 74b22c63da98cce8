use super::{NnError, Result};
use std::f64::consts::PI;

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter array, plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self { velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(), step: 0 }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.velocity.iter().map(Vec::len).collect()
    }
}

/// `v ← μ·v + g + λ·θ; θ ← θ − η·v` over every parameter array.
///
/// Gradients are scanned for NaN/Inf before anything is modified, so a failed
/// step leaves parameters and state untouched.
pub fn sgd_momentum_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    cfg: SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(NnError::ShapeMismatch {
            what: "optimizer arrays",
            expected: (params.len(), 1),
            got: (grads.len(), state.velocity.len()),
        });
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(NnError::ShapeMismatch { what: "optimizer array", expected: (p.len(), i), got: (g.len(), v.len()) });
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(NnError::NonFinite(format!("gradient array {i} entry {j} is {}", g[j])));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// `base_lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}
