use super::tensor::{axpy, dot};
use super::{NnError, Result, Tensor2D};
use rand::Rng;

/// Active `(k_out, k_in)` sub-block of a [`SliceableLinear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Widths {
    pub out: usize,
    pub inp: usize,
}

impl Widths {
    pub fn new(out: usize, inp: usize) -> Self {
        Self { out, inp }
    }
}

/// Dense layer stored at maximal width. A sub-network reads the leading
/// `k_out` rows and `k_in` columns of `weight` and the first `k_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceableLinear {
    /// `max_out × max_in`.
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

/// Gradients of one layer at full size; rows and columns outside the
/// active block stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros(max_out: usize, max_in: usize) -> Self {
        Self { weight: Tensor2D::zeros(max_out, max_in), bias: vec![0.0; max_out] }
    }

    pub fn add_scaled(&mut self, other: &LinearGrad, scale: f64) {
        axpy(scale, other.weight.data(), self.weight.data_mut());
        axpy(scale, &other.bias, &mut self.bias);
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.data_mut().iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }
}

impl SliceableLinear {
    pub fn zeros(max_out: usize, max_in: usize) -> Self {
        Self { weight: Tensor2D::zeros(max_out, max_in), bias: vec![0.0; max_out] }
    }

    /// Uniform He-style init, `U(−√(6/max_in), √(6/max_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(max_out: usize, max_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / max_in as f64).sqrt();
        let data = (0..max_out * max_in).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor2D::from_vec(max_out, max_in, data).expect("sized by construction"),
            bias: vec![0.0; max_out],
        }
    }

    pub fn max_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn max_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn check_widths(&self, w: Widths) -> Result<()> {
        if w.out == 0 || w.out > self.max_out() {
            return Err(NnError::Width { requested: w.out, max: self.max_out() });
        }
        if w.inp == 0 || w.inp > self.max_in() {
            return Err(NnError::Width { requested: w.inp, max: self.max_in() });
        }
        Ok(())
    }

    /// `input · W[..k_out, ..k_in]ᵀ + b[..k_out]`; `input` is `batch × k_in`.
    pub fn forward(&self, w: Widths, input: &Tensor2D) -> Result<Tensor2D> {
        self.check_widths(w)?;
        if input.cols() != w.inp {
            return Err(NnError::ShapeMismatch {
                what: "linear input",
                expected: (input.rows(), w.inp),
                got: input.shape(),
            });
        }
        let mut out = Tensor2D::zeros(input.rows(), w.out);
        for b in 0..input.rows() {
            let x = input.row(b);
            let y = out.row_mut(b);
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = self.bias[o] + dot(&self.weight.row(o)[..w.inp], x);
            }
        }
        Ok(out)
    }

    /// Returns `grad_input` (`batch × k_in`) and accumulates parameter
    /// gradients into the active block of `grad`.
    pub fn backward_into(
        &self,
        w: Widths,
        input: &Tensor2D,
        grad_out: &Tensor2D,
        grad: &mut LinearGrad,
    ) -> Result<Tensor2D> {
        self.check_widths(w)?;
        if input.cols() != w.inp || grad_out.cols() != w.out || input.rows() != grad_out.rows() {
            return Err(NnError::ShapeMismatch {
                what: "linear backward",
                expected: (input.rows(), w.out),
                got: grad_out.shape(),
            });
        }
        if grad.weight.shape() != self.weight.shape() || grad.bias.len() != self.bias.len() {
            return Err(NnError::ShapeMismatch {
                what: "linear gradient buffer",
                expected: self.weight.shape(),
                got: grad.weight.shape(),
            });
        }
        let mut grad_input = Tensor2D::zeros(input.rows(), w.inp);
        for b in 0..input.rows() {
            let g = grad_out.row(b);
            let x = input.row(b);
            let gi = grad_input.row_mut(b);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                axpy(go, &self.weight.row(o)[..w.inp], gi);
                axpy(go, x, &mut grad.weight.row_mut(o)[..w.inp]);
                grad.bias[o] += go;
            }
        }
        Ok(grad_input)
    }

    /// Sub-block gradients `(grad_input, grad_weight k_out×k_in, grad_bias k_out)`.
    pub fn backward(&self, w: Widths, input: &Tensor2D, grad_out: &Tensor2D) -> Result<(Tensor2D, Tensor2D, Vec<f64>)> {
        let mut full = LinearGrad::zeros(self.max_out(), self.max_in());
        let gi = self.backward_into(w, input, grad_out, &mut full)?;
        let gw = full.weight.block(w.out, w.inp);
        full.bias.truncate(w.out);
        Ok((gi, gw, full.bias))
    }
}
