use super::{sample_sandwich, Result, SearchSpace, SubnetConfig, SupernetError};
use crate::data::{batches, Batch, LabeledDataset};
use crate::divergence::{kd_objective, softmax_with_temperature, Branch, DivergenceSpec, KdEval, LogitVec, ProbDist};
use crate::nn::{
    cosine_lr, cross_entropy_batch, cross_entropy_label_smoothing, sgd_momentum_step, Checkpoint, Mlp, MlpGrads,
    OptimizerState, SgdConfig, Tensor2D,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::Write;

// Keep weight init, batch order and sub-network sampling on unrelated streams.
const INIT_SALT: u64 = 0x696e_6974;
const SAMPLER_SALT: u64 = 0x7361_6d70;

/// What the sampled (non-largest) sub-networks are trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubnetTargets {
    /// In-place distillation from the supernet's detached output.
    Teacher,
    /// Label cross-entropy, i.e. slimmable training without KD.
    Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub k_random: usize,
    /// `kd_weight` is γ.
    pub divergence: DivergenceSpec,
    pub label_smoothing: f64,
    pub subnet_targets: SubnetTargets,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            seed: 0,
            k_random: 2,
            divergence: DivergenceSpec::default(),
            label_smoothing: 0.1,
            subnet_targets: SubnetTargets::Teacher,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Set `k_random` and reset γ to the distilled-network count `1 + k_random`.
    pub fn with_k_random(mut self, k_random: usize) -> Self {
        self.k_random = k_random;
        self.divergence.kd_weight = (1 + k_random) as f64;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.divergence.kd_weight
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SupernetError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be finite and > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        self.divergence.validate().map_err(|e| SupernetError::Config(e.to_string()))
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig { lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdMode {
    /// Pure distillation term.
    Supernet,
    /// Mix with label cross-entropy using `spec.distill_weight`.
    Single { label: usize, smoothing: f64 },
}

/// Temperature-scaled distillation loss for one sample.
///
/// Supernet mode gives `T²·D(p‖q)`. Single mode gives
/// `(1−λ)·CE(z, label) + λ·T²·D(p‖q)` with `λ = spec.distill_weight`; the
/// cross-entropy uses the raw logits. `p` is the already-softened teacher.
pub fn assemble_kd_loss(
    p_teacher: &ProbDist,
    student_logits: &LogitVec,
    spec: &DivergenceSpec,
    mode: KdMode,
) -> Result<KdEval> {
    let kd = kd_objective(p_teacher, student_logits, spec)?;
    let t2 = spec.temperature * spec.temperature;
    match mode {
        KdMode::Supernet => Ok(KdEval {
            value: t2 * kd.value,
            grad: kd.grad.iter().map(|g| t2 * g).collect(),
            branch: kd.branch,
        }),
        KdMode::Single { label, smoothing } => {
            let (ce, ce_grad) = cross_entropy_label_smoothing(student_logits.logits(), label, smoothing)?;
            let lam = spec.distill_weight;
            Ok(KdEval {
                value: (1.0 - lam) * ce + lam * t2 * kd.value,
                grad: ce_grad.iter().zip(&kd.grad).map(|(c, k)| (1.0 - lam) * c + lam * t2 * k).collect(),
                branch: kd.branch,
            })
        }
    }
}

/// One sub-network's batch-averaged loss and parameter gradient.
#[derive(Debug, Clone)]
pub struct NetworkGrad {
    pub loss: f64,
    pub grads: MlpGrads,
    pub branch_minus: usize,
    pub branch_plus: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub supernet_loss: f64,
    /// Mean over distilled networks of their batch-mean loss.
    pub kd_loss_mean: f64,
    /// Sum of the same per-network losses.
    pub kd_loss_sum: f64,
    pub branch_minus: usize,
    pub branch_plus: usize,
}

fn non_finite(space: &SearchSpace, config: &SubnetConfig, what: &str) -> SupernetError {
    SupernetError::NonFinite { config: config.label(space), what: what.to_string() }
}

/// Label cross-entropy of the full supernet, its gradient, and the detached
/// softened teacher distribution per row (empty when targets are labels).
pub fn supernet_gradient(
    mlp: &Mlp,
    space: &SearchSpace,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, MlpGrads, Vec<ProbDist>)> {
    let largest = space.largest();
    let pass = mlp.forward(&largest.widths(space), &batch.features)?;
    if !pass.logits.is_finite() {
        return Err(non_finite(space, &largest, "supernet logits"));
    }
    let (loss, grad) = cross_entropy_batch(&pass.logits, &batch.labels, cfg.label_smoothing)?;
    if !loss.is_finite() {
        return Err(non_finite(space, &largest, "supernet loss"));
    }
    let mut grads = MlpGrads::zeros_like(mlp);
    mlp.backward(&pass, &grad, &mut grads)?;
    let teacher = match cfg.subnet_targets {
        SubnetTargets::Labels => Vec::new(),
        SubnetTargets::Teacher => (0..pass.logits.rows())
            .map(|b| softmax_with_temperature(&LogitVec::new(pass.logits.row(b).to_vec())?, cfg.divergence.temperature))
            .collect::<std::result::Result<_, _>>()?,
    };
    Ok((loss, grads, teacher))
}

/// Batch-averaged gradient of one sampled sub-network against its target.
pub fn distill_gradient(
    mlp: &Mlp,
    space: &SearchSpace,
    config: &SubnetConfig,
    batch: &Batch,
    teacher: &[ProbDist],
    cfg: &TrainConfig,
) -> Result<NetworkGrad> {
    let pass = mlp.forward(&config.widths(space), &batch.features)?;
    if !pass.logits.is_finite() {
        return Err(non_finite(space, config, "logits"));
    }
    let n = batch.labels.len();
    let (mut minus, mut plus) = (0, 0);
    let (loss, grad_logits) = match cfg.subnet_targets {
        SubnetTargets::Labels => cross_entropy_batch(&pass.logits, &batch.labels, cfg.label_smoothing)?,
        SubnetTargets::Teacher => {
            if teacher.len() != n {
                return Err(SupernetError::Config(format!("{} teacher rows for a batch of {n}", teacher.len())));
            }
            let mut g = Tensor2D::zeros(n, pass.logits.cols());
            let mut total = 0.0;
            for (b, p) in teacher.iter().enumerate() {
                let z = LogitVec::new(pass.logits.row(b).to_vec())?;
                let e = assemble_kd_loss(p, &z, &cfg.divergence, KdMode::Supernet)?;
                total += e.value;
                match e.branch {
                    Some(Branch::Minus) => minus += 1,
                    Some(Branch::Plus) => plus += 1,
                    None => {}
                }
                for (dst, v) in g.row_mut(b).iter_mut().zip(&e.grad) {
                    *dst = v / n as f64;
                }
            }
            (total / n as f64, g)
        }
    };
    if !loss.is_finite() {
        return Err(non_finite(space, config, "distillation loss"));
    }
    let mut grads = MlpGrads::zeros_like(mlp);
    mlp.backward(&pass, &grad_logits, &mut grads)?;
    if !grads.is_finite() {
        return Err(non_finite(space, config, "gradient"));
    }
    Ok(NetworkGrad { loss, grads, branch_minus: minus, branch_plus: plus })
}

/// Combined step gradient: supernet cross-entropy plus `γ/n` times the sum of
/// the `n` distilled networks' averaged gradients.
pub fn step_gradient(
    mlp: &Mlp,
    space: &SearchSpace,
    batch: &Batch,
    distilled: &[SubnetConfig],
    cfg: &TrainConfig,
) -> Result<(MlpGrads, StepReport)> {
    if batch.labels.is_empty() {
        return Err(SupernetError::Config("empty batch".into()));
    }
    if let Some(bad) = distilled.iter().find(|c| !space.contains(c)) {
        return Err(SupernetError::Space(format!("config {:?} is outside the space", bad.choices())));
    }
    let (supernet_loss, mut total, teacher) = supernet_gradient(mlp, space, batch, cfg)?;
    // Order-preserving collect keeps the summation below deterministic.
    let nets: Vec<NetworkGrad> = distilled
        .par_iter()
        .map(|c| distill_gradient(mlp, space, c, batch, &teacher, cfg))
        .collect::<Result<_>>()?;
    let mut report = StepReport { supernet_loss, ..StepReport::default() };
    if !nets.is_empty() {
        let scale = cfg.gamma() / nets.len() as f64;
        for net in &nets {
            total.add_scaled(&net.grads, scale);
            report.kd_loss_sum += net.loss;
            report.branch_minus += net.branch_minus;
            report.branch_plus += net.branch_plus;
        }
        report.kd_loss_mean = report.kd_loss_sum / nets.len() as f64;
    }
    Ok((total, report))
}

/// One optimizer step of in-place distillation. `distilled` excludes the
/// supernet itself, which is always trained on labels.
pub fn train_step(
    mlp: &mut Mlp,
    opt: &mut OptimizerState,
    batch: &Batch,
    space: &SearchSpace,
    distilled: &[SubnetConfig],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    let (grads, report) = step_gradient(mlp, space, batch, distilled, cfg)?;
    sgd_momentum_step(&mut mlp.params_mut(), &grads.slices(), opt, cfg.sgd(lr))?;
    Ok(report)
}

pub fn evaluate_accuracy(mlp: &Mlp, space: &SearchSpace, config: &SubnetConfig, data: &LabeledDataset) -> Result<f64> {
    Ok(mlp.accuracy(&config.widths(space), data.features(), data.labels())?)
}

/// Parameters, optimizer buffers and progress; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub mlp: Mlp,
    pub opt: OptimizerState,
    pub epochs_done: u64,
}

impl TrainState {
    pub fn new(space: &SearchSpace, seed: u64) -> Result<Self> {
        let mlp = space.build_mlp(&mut ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT))?;
        let opt = OptimizerState::new(&mlp.param_sizes());
        Ok(Self { mlp, opt, epochs_done: 0 })
    }

    /// Arrays plus `space`, `epochs_done` and `step` in the metadata.
    pub fn to_checkpoint(&self, space: &SearchSpace) -> Checkpoint {
        let mut ck = Checkpoint { arrays: self.mlp.to_arrays(), ..Checkpoint::default() };
        ck.arrays.extend(self.opt.to_arrays());
        ck.meta.insert("space".into(), serde_json::to_value(space).expect("space serializes"));
        ck.meta.insert("epochs_done".into(), Value::from(self.epochs_done));
        ck.meta.insert("step".into(), Value::from(self.opt.step));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(SearchSpace, Self)> {
        let space: SearchSpace = serde_json::from_value(ck.meta.get("space").cloned().unwrap_or(Value::Null))
            .map_err(|e| SupernetError::Meta(format!("space: {e}")))?;
        space.validate()?;
        let count = |key: &str| {
            ck.meta.get(key).and_then(Value::as_u64).ok_or_else(|| SupernetError::Meta(format!("missing '{key}'")))
        };
        let (epochs_done, step) = (count("epochs_done")?, count("step")?);
        let mlp = Mlp::from_checkpoint(space.input_dim(), space.max_widths(), space.classes(), ck)?;
        let opt = OptimizerState::from_checkpoint(&mlp.param_sizes(), step, ck)?;
        Ok((space, Self { mlp, opt, epochs_done }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: u64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub supernet_loss: f64,
    pub kd_loss_mean: f64,
    /// 0 when no adaptive evaluations happened.
    pub branch_minus_fraction: f64,
    pub val_acc_largest: f64,
    pub val_acc_smallest: f64,
    pub kd_loss_sum: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "lr",
    "supernet_loss",
    "kd_loss_mean",
    "branch_minus_fraction",
    "val_acc_largest",
    "val_acc_smallest",
    "kd_loss_sum",
];

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], out: W, header: bool) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Run the next epoch. Batch order and sub-network draws depend only on
/// `(seed, epoch)` and the LR schedule on the global step, so a run resumed
/// from a checkpoint reproduces an uninterrupted one.
pub fn train_epoch(
    state: &mut TrainState,
    space: &SearchSpace,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if !space.matches(&state.mlp) {
        return Err(SupernetError::Space("network architecture does not match the search space".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| SupernetError::Config(format!("thread pool: {e}")))?;
    let epoch = state.epochs_done;
    let iter = batches(train, cfg.batch_size, cfg.seed, epoch)?;
    let total_steps = iter.num_batches() as u64 * cfg.epochs;
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    sampler.set_stream(epoch);

    let first_lr = cosine_lr(state.opt.step, total_steps, cfg.base_lr);
    let (mut steps, mut sup, mut kd_mean, mut kd_sum, mut minus, mut plus) = (0usize, 0.0, 0.0, 0.0, 0usize, 0usize);
    pool.install(|| -> Result<()> {
        for batch in iter {
            let lr = cosine_lr(state.opt.step, total_steps, cfg.base_lr);
            let sandwich = sample_sandwich(space, &mut sampler, cfg.k_random);
            let r = train_step(&mut state.mlp, &mut state.opt, &batch, space, &sandwich[1..], cfg, lr)?;
            steps += 1;
            sup += r.supernet_loss;
            kd_mean += r.kd_loss_mean;
            kd_sum += r.kd_loss_sum;
            minus += r.branch_minus;
            plus += r.branch_plus;
        }
        Ok(())
    })?;
    state.epochs_done += 1;

    let n = steps.max(1) as f64;
    Ok(EpochMetrics {
        epoch: state.epochs_done,
        lr: first_lr,
        supernet_loss: sup / n,
        kd_loss_mean: kd_mean / n,
        branch_minus_fraction: if minus + plus == 0 { 0.0 } else { minus as f64 / (minus + plus) as f64 },
        val_acc_largest: evaluate_accuracy(&state.mlp, space, &space.largest(), val)?,
        val_acc_smallest: evaluate_accuracy(&state.mlp, space, &space.smallest(), val)?,
        kd_loss_sum: kd_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::divergence::DivergenceKind;

    fn space() -> SearchSpace {
        SearchSpace::uniform(4, vec![8, 6], &[0.25, 0.5, 1.0], 3).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let ds = synth_blobs(n, 3, 4, 1.0, seed).unwrap();
        batches(&ds, 3 * n, 0, 0).unwrap().next().unwrap()
    }

    fn logits(v: &[f64]) -> LogitVec {
        LogitVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn assemble_distill_weight_endpoints() {
        let p = ProbDist::new(vec![0.6, 0.3, 0.1]).unwrap();
        let z = logits(&[0.2, -0.4, 1.1]);
        let mut spec = DivergenceSpec { distill_weight: 0.0, ..DivergenceSpec::default() };
        let single = KdMode::Single { label: 1, smoothing: 0.1 };
        let ce = cross_entropy_label_smoothing(z.logits(), 1, 0.1).unwrap();
        let got = assemble_kd_loss(&p, &z, &spec, single).unwrap();
        assert_eq!((got.value, got.grad), ce);

        spec.distill_weight = 1.0;
        let kd = kd_objective(&p, &z, &spec).unwrap();
        let got = assemble_kd_loss(&p, &z, &spec, single).unwrap();
        assert_eq!(got.value, kd.value);
        assert_eq!(got.grad, kd.grad);
        assert_eq!(assemble_kd_loss(&p, &z, &spec, KdMode::Supernet).unwrap(), kd);
    }

    #[test]
    fn temperature_squared_scaling() {
        let p = ProbDist::new(vec![0.5, 0.2, 0.3]).unwrap();
        let z = logits(&[1.0, 0.0, -0.5]);
        for kind in [DivergenceKind::Kl, DivergenceKind::AdaptiveAlpha] {
            let spec = DivergenceSpec { temperature: 2.0, ..DivergenceSpec::with_kind(kind) };
            let raw = kd_objective(&p, &z, &spec).unwrap();
            let got = assemble_kd_loss(&p, &z, &spec, KdMode::Supernet).unwrap();
            for (a, b) in got.grad.iter().zip(&raw.grad) {
                assert!((a - 4.0 * b).abs() < 1e-15);
            }
            // In single mode the KD part carries the same factor.
            let ce = cross_entropy_label_smoothing(z.logits(), 0, 0.0).unwrap().1;
            let mixed = assemble_kd_loss(&p, &z, &spec, KdMode::Single { label: 0, smoothing: 0.0 }).unwrap();
            for ((m, c), r) in mixed.grad.iter().zip(&ce).zip(&raw.grad) {
                assert!((m - (0.1 * c + 0.9 * 4.0 * r)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_gamma_is_plain_supernet_training() {
        let s = space();
        let b = batch(4, 1);
        let cfg = TrainConfig { divergence: DivergenceSpec { kd_weight: 0.0, ..DivergenceSpec::default() }, ..TrainConfig::default() };
        let mut a = TrainState::new(&s, 3).unwrap();
        let mut plain = a.clone();
        train_step(&mut a.mlp, &mut a.opt, &b, &s, &[s.smallest(), s.random(&mut ChaCha8Rng::seed_from_u64(0))], &cfg, 0.05)
            .unwrap();
        let (_, g, _) = supernet_gradient(&plain.mlp, &s, &b, &cfg).unwrap();
        sgd_momentum_step(&mut plain.mlp.params_mut(), &g.slices(), &mut plain.opt, cfg.sgd(0.05)).unwrap();
        assert_eq!(a, plain);
    }

    #[test]
    fn single_width_space_has_no_kd_gradient() {
        let s = SearchSpace::uniform(4, vec![5, 5], &[1.0], 3).unwrap();
        let b = batch(3, 2);
        let st = TrainState::new(&s, 1).unwrap();
        let cfg = TrainConfig::default();
        let (_, _, teacher) = supernet_gradient(&st.mlp, &s, &b, &cfg).unwrap();
        let net = distill_gradient(&st.mlp, &s, &s.smallest(), &b, &teacher, &cfg).unwrap();
        assert!(net.loss.abs() < 1e-15);
        let zero = MlpGrads::zeros_like(&st.mlp);
        assert!(net.grads.max_abs_diff(&zero) < 1e-15);
    }

    #[test]
    fn applied_gradient_is_sum_of_parts() {
        let s = space();
        let b = batch(5, 3);
        let st = TrainState::new(&s, 9).unwrap();
        let cfg = TrainConfig::default();
        let distilled = vec![s.smallest(), SubnetConfig::new(vec![1, 2]), SubnetConfig::new(vec![2, 0])];
        let (total, report) = step_gradient(&st.mlp, &s, &b, &distilled, &cfg).unwrap();

        let (ce_loss, mut expect, teacher) = supernet_gradient(&st.mlp, &s, &b, &cfg).unwrap();
        assert_eq!(report.supernet_loss, ce_loss);
        let mut losses = 0.0;
        for c in &distilled {
            let net = distill_gradient(&st.mlp, &s, c, &b, &teacher, &cfg).unwrap();
            expect.add_scaled(&net.grads, cfg.gamma() / 3.0);
            losses += net.loss;
        }
        assert!(total.max_abs_diff(&expect) < 1e-10);
        assert!((report.kd_loss_sum - losses).abs() < 1e-12);
        assert_eq!(report.branch_minus + report.branch_plus, 45);
    }

    #[test]
    fn averaged_gamma_equals_summed_convention_at_default() {
        // γ = number of distilled networks: averaging then scaling by γ is the
        // same as summing the per-network losses with weight 1.
        let s = space();
        let b = batch(4, 5);
        let st = TrainState::new(&s, 2).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(cfg.gamma(), 3.0);
        let distilled = vec![s.smallest(), SubnetConfig::new(vec![1, 1]), SubnetConfig::new(vec![0, 2])];
        let (total, _) = step_gradient(&st.mlp, &s, &b, &distilled, &cfg).unwrap();
        let (_, mut summed, teacher) = supernet_gradient(&st.mlp, &s, &b, &cfg).unwrap();
        for c in &distilled {
            summed.add_scaled(&distill_gradient(&st.mlp, &s, c, &b, &teacher, &cfg).unwrap().grads, 1.0);
        }
        assert!(total.max_abs_diff(&summed) < 1e-12);
        assert_eq!(TrainConfig::default().with_k_random(4).gamma(), 5.0);
    }

    #[test]
    fn teacher_only_weights_get_no_kd_gradient() {
        // Stop-gradient: rows the smallest network never reads stay untouched
        // by its distillation gradient, though they shaped the teacher.
        let s = space();
        let b = batch(4, 6);
        let st = TrainState::new(&s, 4).unwrap();
        let cfg = TrainConfig::default();
        let (_, _, teacher) = supernet_gradient(&st.mlp, &s, &b, &cfg).unwrap();
        let net = distill_gradient(&st.mlp, &s, &s.smallest(), &b, &teacher, &cfg).unwrap();
        let w = s.smallest().widths(&s);
        let g0 = &net.grads.layers[0].weight;
        assert!(g0.data().iter().any(|v| *v != 0.0));
        for r in w[0]..g0.rows() {
            assert!(g0.row(r).iter().all(|v| *v == 0.0));
        }
        let g2 = &net.grads.layers[2].weight;
        for r in 0..g2.rows() {
            assert!(g2.row(r)[w[1]..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn kd_gradient_matches_finite_differences_with_fixed_teacher() {
        let s = space();
        let b = batch(2, 7);
        let st = TrainState::new(&s, 5).unwrap();
        // Clipping makes the gradient differ from that of the forward value.
        let mut cfg = TrainConfig::default();
        cfg.divergence.clip_factor = f64::INFINITY;
        let (_, _, teacher) = supernet_gradient(&st.mlp, &s, &b, &cfg).unwrap();
        let c = SubnetConfig::new(vec![1, 1]);
        let net = distill_gradient(&st.mlp, &s, &c, &b, &teacher, &cfg).unwrap();
        let h = 1e-6;
        for (layer, idx) in [(0usize, 1usize), (1, 0), (2, 4)] {
            let loss_at = |delta: f64| {
                let mut m = st.mlp.clone();
                m.layers[layer].weight.data_mut()[idx] += delta;
                distill_gradient(&m, &s, &c, &b, &teacher, &cfg).unwrap().loss
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let an = net.grads.layers[layer].weight.data()[idx];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "layer {layer}: {an} vs {fd}");
        }
    }

    #[test]
    fn nan_aborts_with_offending_config() {
        let s = space();
        let b = batch(2, 8);
        let mut st = TrainState::new(&s, 1).unwrap();
        // Only the full-width network reads the last hidden unit.
        let last = st.mlp.layers[2].weight.cols() - 1;
        st.mlp.layers[2].weight.set(0, last, f64::NAN);
        let cfg = TrainConfig::default();
        let before = st.clone();
        let err = train_step(&mut st.mlp, &mut st.opt, &b, &s, &[s.smallest()], &cfg, 0.1).unwrap_err();
        match err {
            SupernetError::NonFinite { config, .. } => assert_eq!(config, "8-6"),
            other => panic!("{other}"),
        }
        assert_eq!(format!("{:?}", st), format!("{:?}", before));
    }

    /// Reference step written directly against the per-sample primitives.
    fn reference_step(st: &mut TrainState, s: &SearchSpace, b: &Batch, distilled: &[SubnetConfig], cfg: &TrainConfig, lr: f64) -> (f64, f64) {
        let n = b.labels.len() as f64;
        let mut grads = MlpGrads::zeros_like(&st.mlp);
        let full = st.mlp.forward(&s.largest().widths(s), &b.features).unwrap();
        let mut g = Tensor2D::zeros(full.logits.rows(), full.logits.cols());
        let mut ce = 0.0;
        let mut teacher = Vec::new();
        for (i, &y) in b.labels.iter().enumerate() {
            let (l, gi) = cross_entropy_label_smoothing(full.logits.row(i), y, cfg.label_smoothing).unwrap();
            ce += l / n;
            g.row_mut(i).iter_mut().zip(gi).for_each(|(d, v)| *d = v / n);
            teacher.push(softmax_with_temperature(&logits(full.logits.row(i)), cfg.divergence.temperature).unwrap());
        }
        st.mlp.backward(&full, &g, &mut grads).unwrap();
        let mut kd_total = 0.0;
        for c in distilled {
            let pass = st.mlp.forward(&c.widths(s), &b.features).unwrap();
            let mut g = Tensor2D::zeros(pass.logits.rows(), pass.logits.cols());
            for (i, p) in teacher.iter().enumerate() {
                let e = kd_objective(p, &logits(pass.logits.row(i)), &cfg.divergence).unwrap();
                kd_total += e.value / n;
                let w = cfg.gamma() / distilled.len() as f64 / n;
                g.row_mut(i).iter_mut().zip(e.grad).for_each(|(d, v)| *d = w * v);
            }
            st.mlp.backward(&pass, &g, &mut grads).unwrap();
        }
        sgd_momentum_step(&mut st.mlp.params_mut(), &grads.slices(), &mut st.opt, cfg.sgd(lr)).unwrap();
        (ce, kd_total / distilled.len() as f64)
    }

    #[test]
    fn two_step_trace_matches_reference() {
        let s = space();
        let cfg = TrainConfig::default();
        let mut st = TrainState::new(&s, 12).unwrap();
        let mut reference = st.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for step in 0..2u64 {
            let b = batch(4, 20 + step);
            let sw = sample_sandwich(&s, &mut rng, cfg.k_random);
            let r = train_step(&mut st.mlp, &mut st.opt, &b, &s, &sw[1..], &cfg, 0.1).unwrap();
            let (ce, kd) = reference_step(&mut reference, &s, &b, &sw[1..], &cfg, 0.1);
            assert!((r.supernet_loss - ce).abs() < 1e-12);
            assert!((r.kd_loss_mean - kd).abs() < 1e-12);
        }
        let diff = st
            .mlp
            .params()
            .iter()
            .zip(reference.mlp.params())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    fn tiny_space() -> SearchSpace {
        SearchSpace::uniform(4, vec![8, 6], &[0.5, 1.0], 3).unwrap()
    }

    fn tiny_run(cfg: &TrainConfig) -> (TrainState, Vec<EpochMetrics>) {
        let s = tiny_space();
        let ds = synth_blobs(60, 3, 4, 1.0, 0).unwrap();
        let (tr, va) = ds.split(0.8, 1).unwrap();
        let mut st = TrainState::new(&s, cfg.seed).unwrap();
        let rows = (0..cfg.epochs).map(|_| train_epoch(&mut st, &s, &tr, &va, cfg).unwrap()).collect();
        (st, rows)
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig { epochs: 4, batch_size: 16, base_lr: 0.02, ..TrainConfig::default() };
        let (a, ra) = tiny_run(&cfg);
        let (b, rb) = tiny_run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(ra[3].supernet_loss < ra[0].supernet_loss);
        assert!(ra[3].val_acc_largest > 0.8, "{:?}", ra[3]);
        assert_eq!(ra[0].lr, 0.02);
        assert!(ra.iter().all(|r| (0.0..=1.0).contains(&r.branch_minus_fraction)));
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let cfg = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let (full, rows) = tiny_run(&cfg);

        let s = tiny_space();
        let ds = synth_blobs(60, 3, 4, 1.0, 0).unwrap();
        let (tr, va) = ds.split(0.8, 1).unwrap();
        let mut st = TrainState::new(&s, cfg.seed).unwrap();
        train_epoch(&mut st, &s, &tr, &va, &cfg).unwrap();
        let mut buf = Vec::new();
        st.to_checkpoint(&s).write_to(&mut buf).unwrap();
        let (s2, mut resumed) = TrainState::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(s2, s);
        let mut tail = Vec::new();
        for _ in 1..3 {
            tail.push(train_epoch(&mut resumed, &s2, &tr, &va, &cfg).unwrap());
        }
        assert_eq!(resumed, full);
        assert_eq!(tail, rows[1..]);
    }

    #[test]
    fn metrics_csv_header() {
        let row = EpochMetrics {
            epoch: 1,
            lr: 0.1,
            supernet_loss: 1.0,
            kd_loss_mean: 0.5,
            branch_minus_fraction: 0.25,
            val_acc_largest: 0.9,
            val_acc_smallest: 0.8,
            kd_loss_sum: 1.5,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.1,1.0,0.5,0.25,0.9,0.8,1.5");
    }

    #[test]
    fn labels_baseline_reports_no_branches() {
        let cfg = TrainConfig { epochs: 1, batch_size: 16, subnet_targets: SubnetTargets::Labels, ..TrainConfig::default() };
        let (_, rows) = tiny_run(&cfg);
        assert_eq!(rows[0].branch_minus_fraction, 0.0);
        assert!(rows[0].kd_loss_mean > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.divergence.clip_factor = 0.5;
        assert!(matches!(bad.validate(), Err(SupernetError::Config(_))));
    }
}
