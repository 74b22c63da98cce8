use super::train::{assemble_kd_loss, KdMode, TrainConfig, TrainState};
use super::{Result, SupernetError};
use crate::data::{batches, LabeledDataset};
use crate::divergence::{softmax_with_temperature, Branch, LogitVec};
use crate::nn::{cosine_lr, sgd_momentum_step, Mlp, MlpGrads, OptimizerState, SgdConfig, Tensor2D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const STUDENT_SALT: u64 = 0x7374_7564;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentMetrics {
    pub epoch: u64,
    pub lr: f64,
    /// Mean of `(1−λ)·CE + λ·T²·D` over the epoch's batches.
    pub loss: f64,
    pub branch_minus_fraction: f64,
    pub val_acc: f64,
}

/// Fresh full-width student with the given hidden widths.
pub fn new_student(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<TrainState> {
    let mlp = Mlp::new(input_dim, hidden, classes, &mut ChaCha8Rng::seed_from_u64(seed ^ STUDENT_SALT))?;
    let opt = OptimizerState::new(&mlp.param_sizes());
    Ok(TrainState { mlp, opt, epochs_done: 0 })
}

/// One epoch of distilling a frozen `teacher` (run at `teacher_widths`) into
/// `student`, using the mixed label/KD loss with `cfg.divergence`.
pub fn train_student_epoch(
    student: &mut TrainState,
    teacher: &Mlp,
    teacher_widths: &[usize],
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<StudentMetrics> {
    cfg.validate()?;
    if teacher.classes() != student.mlp.classes() || teacher.input_dim() != student.mlp.input_dim() {
        return Err(SupernetError::Config("teacher and student disagree on input or class count".into()));
    }
    let spec = cfg.divergence;
    let hidden = student.mlp.hidden().to_vec();
    let iter = batches(train, cfg.batch_size, cfg.seed, student.epochs_done)?;
    let total = iter.num_batches() as u64 * cfg.epochs;
    let first_lr = cosine_lr(student.opt.step, total, cfg.base_lr);
    let (mut loss_sum, mut steps, mut minus, mut plus) = (0.0, 0usize, 0usize, 0usize);
    for batch in iter {
        let lr = cosine_lr(student.opt.step, total, cfg.base_lr);
        let t_logits = teacher.logits(teacher_widths, &batch.features)?;
        let pass = student.mlp.forward(&hidden, &batch.features)?;
        if !pass.logits.is_finite() || !t_logits.is_finite() {
            return Err(SupernetError::NonFinite { config: format!("student {hidden:?}"), what: "logits".into() });
        }
        let n = batch.labels.len() as f64;
        let mut g = Tensor2D::zeros(pass.logits.rows(), pass.logits.cols());
        let mut batch_loss = 0.0;
        for (b, &label) in batch.labels.iter().enumerate() {
            let p = softmax_with_temperature(&LogitVec::new(t_logits.row(b).to_vec())?, spec.temperature)?;
            let z = LogitVec::new(pass.logits.row(b).to_vec())?;
            let e = assemble_kd_loss(&p, &z, &spec, KdMode::Single { label, smoothing: cfg.label_smoothing })?;
            batch_loss += e.value / n;
            match e.branch {
                Some(Branch::Minus) => minus += 1,
                Some(Branch::Plus) => plus += 1,
                None => {}
            }
            for (dst, v) in g.row_mut(b).iter_mut().zip(&e.grad) {
                *dst = v / n;
            }
        }
        if !batch_loss.is_finite() {
            return Err(SupernetError::NonFinite { config: format!("student {hidden:?}"), what: "loss".into() });
        }
        let mut grads = MlpGrads::zeros_like(&student.mlp);
        student.mlp.backward(&pass, &g, &mut grads)?;
        let sgd = SgdConfig { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        sgd_momentum_step(&mut student.mlp.params_mut(), &grads.slices(), &mut student.opt, sgd)?;
        loss_sum += batch_loss;
        steps += 1;
    }
    student.epochs_done += 1;
    Ok(StudentMetrics {
        epoch: student.epochs_done,
        lr: first_lr,
        loss: loss_sum / steps.max(1) as f64,
        branch_minus_fraction: if minus + plus == 0 { 0.0 } else { minus as f64 / (minus + plus) as f64 },
        val_acc: student.mlp.accuracy(&hidden, val.features(), val.labels())?,
    })
}
