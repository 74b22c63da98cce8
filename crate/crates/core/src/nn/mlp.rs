use super::linear::{LinearGrad, SliceableLinear, Widths};
use super::loss::{relu_backward, relu_forward};
use super::{NnError, Result, Tensor2D};
use rand::Rng;

/// ReLU MLP whose hidden layers can each run at any leading width.
///
/// `input_dim → hidden[0] → … → hidden[L−1] → classes`. Input and output
/// dimensions are fixed; only the hidden widths are sliced.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    hidden: Vec<usize>,
    classes: usize,
    pub layers: Vec<SliceableLinear>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub widths: Vec<Widths>,
    /// Input to each linear layer.
    inputs: Vec<Tensor2D>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Tensor2D>,
    pub logits: Tensor2D,
}

/// Full-size gradient buffers for every layer of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self { layers: mlp.layers.iter().map(|l| LinearGrad::zeros(l.max_out(), l.max_in())).collect() }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
    }

    /// Flat views in `[w0, b0, w1, b1, …]` order, matching [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.as_slice()]).collect()
    }

    pub fn max_abs_diff(&self, other: &MlpGrads) -> f64 {
        self.slices()
            .iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(input_dim, hidden, classes)?;
        for layer in &mut mlp.layers {
            *layer = SliceableLinear::init(layer.max_out(), layer.max_in(), rng);
        }
        Ok(mlp)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(NnError::InvalidArgument("all layer sizes must be >= 1".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims.windows(2).map(|w| SliceableLinear::zeros(w[1], w[0])).collect();
        Ok(Self { input_dim, hidden: hidden.to_vec(), classes, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-layer `(k_out, k_in)` for the given active hidden widths.
    pub fn layer_widths(&self, active: &[usize]) -> Result<Vec<Widths>> {
        if active.len() != self.hidden.len() {
            return Err(NnError::ShapeMismatch {
                what: "hidden widths",
                expected: (self.hidden.len(), 1),
                got: (active.len(), 1),
            });
        }
        for (&a, &max) in active.iter().zip(&self.hidden) {
            if a == 0 || a > max {
                return Err(NnError::Width { requested: a, max });
            }
        }
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(active);
        dims.push(self.classes);
        Ok(dims.windows(2).map(|w| Widths::new(w[1], w[0])).collect())
    }

    pub fn forward(&self, active: &[usize], x: &Tensor2D) -> Result<ForwardPass> {
        let widths = self.layer_widths(active)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, (layer, &w)) in self.layers.iter().zip(&widths).enumerate() {
            let z = layer.forward(w, &h)?;
            inputs.push(h);
            if i == last {
                return Ok(ForwardPass { widths, inputs, pre, logits: z });
            }
            h = relu_forward(&z);
            pre.push(z);
        }
        unreachable!("an Mlp always has an output layer")
    }

    pub fn logits(&self, active: &[usize], x: &Tensor2D) -> Result<Tensor2D> {
        let widths = self.layer_widths(active)?;
        let mut h = self.layers[0].forward(widths[0], x)?;
        for (layer, &w) in self.layers[1..].iter().zip(&widths[1..]) {
            h = relu_forward(&h);
            h = layer.forward(w, &h)?;
        }
        Ok(h)
    }

    /// Backpropagate `grad_logits` and accumulate into `grads`.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Tensor2D, grads: &mut MlpGrads) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch {
                what: "gradient layers",
                expected: (self.layers.len(), 1),
                got: (grads.layers.len(), 1),
            });
        }
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let gi = self.layers[i].backward_into(pass.widths[i], &pass.inputs[i], &g, &mut grads.layers[i])?;
            if i > 0 {
                g = relu_backward(&pass.pre[i - 1], &gi)?;
            }
        }
        Ok(())
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weight.data().len(), l.bias.len()]).collect()
    }

    /// Flat mutable views in `[w0, b0, w1, b1, …]` order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.as_slice()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, active: &[usize], x: &Tensor2D, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(NnError::InvalidArgument("accuracy on an empty set".into()));
        }
        if labels.len() != x.rows() {
            return Err(NnError::ShapeMismatch { what: "labels", expected: (x.rows(), 1), got: (labels.len(), 1) });
        }
        let logits = self.logits(active, x)?;
        let correct = (0..logits.rows()).filter(|&b| argmax(logits.row(b)) == labels[b]).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
