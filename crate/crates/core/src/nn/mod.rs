//! Minimal dense neural-network core with manual backpropagation.
//!
//! Layers are stored at their maximal width and every forward/backward call
//! names the active sub-block, so any number of sub-networks share one set
//! of parameters. All arithmetic is `f64`.

pub mod checkpoint;
mod linear;
mod loss;
mod mlp;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, NamedArray};
pub use linear::{LinearGrad, SliceableLinear, Widths};
pub use loss::{cross_entropy_batch, cross_entropy_label_smoothing, log_softmax, relu_backward, relu_forward};
pub use mlp::{argmax, ForwardPass, Mlp, MlpGrads};
pub use optim::{cosine_lr, sgd_momentum_step, OptimizerState, SgdConfig};
pub use tensor::Tensor2D;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("width {requested} outside 1..={max}")]
    Width { requested: usize, max: usize },
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

impl Mlp {
    /// Parameters as `layer{i}.weight` / `layer{i}.bias` arrays.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    NamedArray::new(format!("layer{i}.weight"), vec![l.max_out(), l.max_in()], l.weight.data().to_vec()),
                    NamedArray::new(format!("layer{i}.bias"), vec![l.max_out()], l.bias.clone()),
                ]
            })
            .collect()
    }

    /// Rebuild an MLP of the given architecture from checkpoint arrays.
    pub fn from_checkpoint(input_dim: usize, hidden: &[usize], classes: usize, ck: &Checkpoint) -> Result<Self> {
        let mut mlp = Mlp::zeros(input_dim, hidden, classes)?;
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let w = ck.get(&format!("layer{i}.weight"))?;
            let b = ck.get(&format!("layer{i}.bias"))?;
            if w.shape != [layer.max_out(), layer.max_in()] || b.shape != [layer.max_out()] {
                return Err(NnError::ShapeMismatch {
                    what: "checkpoint layer",
                    expected: (layer.max_out(), layer.max_in()),
                    got: (w.shape.first().copied().unwrap_or(0), w.shape.get(1).copied().unwrap_or(0)),
                });
            }
            layer.weight = Tensor2D::from_vec(layer.max_out(), layer.max_in(), w.data.clone())?;
            layer.bias = b.data.clone();
        }
        Ok(mlp)
    }
}

impl OptimizerState {
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.velocity
            .iter()
            .enumerate()
            .map(|(i, v)| NamedArray::new(format!("optim.velocity{i}"), vec![v.len()], v.clone()))
            .collect()
    }

    pub fn from_checkpoint(sizes: &[usize], step: u64, ck: &Checkpoint) -> Result<Self> {
        let mut velocity = Vec::with_capacity(sizes.len());
        for (i, &n) in sizes.iter().enumerate() {
            let a = ck.get(&format!("optim.velocity{i}"))?;
            if a.data.len() != n {
                return Err(NnError::ShapeMismatch { what: "optimizer buffer", expected: (n, 1), got: (a.data.len(), 1) });
            }
            velocity.push(a.data.clone());
        }
        Ok(Self { velocity, step })
    }
}
