use super::{NnError, Result, Tensor2D};

pub fn relu_forward(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient through ReLU given the pre-activation it was applied to.
pub fn relu_backward(pre: &Tensor2D, grad: &Tensor2D) -> Result<Tensor2D> {
    if pre.shape() != grad.shape() {
        return Err(NnError::ShapeMismatch { what: "relu backward", expected: pre.shape(), got: grad.shape() });
    }
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2D::from_vec(pre.rows(), pre.cols(), data)
}

/// `log softmax(z)` computed stably.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy of one logit row against a label-smoothed target
/// `y' = (1−s)·onehot(target) + s/m`. Returns `(loss, ∂loss/∂z)`.
pub fn cross_entropy_label_smoothing(logits: &[f64], target: usize, smoothing: f64) -> Result<(f64, Vec<f64>)> {
    let m = logits.len();
    if target >= m {
        return Err(NnError::Label { label: target, classes: m });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(NnError::InvalidArgument(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    let logp = log_softmax(logits);
    let off = smoothing / m as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(m);
    for (i, &lp) in logp.iter().enumerate() {
        let y = if i == target { 1.0 - smoothing + off } else { off };
        if y > 0.0 {
            loss -= y * lp;
        }
        grad.push(lp.exp() - y);
    }
    Ok((loss, grad))
}

/// Mean label-smoothed cross-entropy over a batch; the gradient is already divided by the batch size.
pub fn cross_entropy_batch(logits: &Tensor2D, targets: &[usize], smoothing: f64) -> Result<(f64, Tensor2D)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(NnError::ShapeMismatch {
            what: "cross-entropy targets",
            expected: (logits.rows(), 1),
            got: (targets.len(), 1),
        });
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    for (b, &t) in targets.iter().enumerate() {
        let (l, g) = cross_entropy_label_smoothing(logits.row(b), t, smoothing)?;
        total += l;
        for (dst, v) in grad.row_mut(b).iter_mut().zip(g) {
            *dst = v / n;
        }
    }
    Ok((total / n, grad))
}
