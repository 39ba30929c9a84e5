//! Fully connected networks with exact backpropagation.
//!
//! All parameters live in one flat vector, layer after layer, each layer
//! stored as a row-major `in x out` weight block followed by its `out` biases.
//! Gradients use the same layout, so optimizers, target-network averaging
//! and snapshots all work on plain slices.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix, Operand};
use super::rng::Rng;
use crate::error::{GentleError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    #[inline]
    fn backprop(self, out: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &o)| {
                if o <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &o)| *g *= 1.0 - o * o),
            Activation::Identity => {}
        }
    }
}

/// Borrowed view of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out`.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    acts: Vec<Activation>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[0]` is the input, `values[l + 1]` the output of layer `l`.
    values: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.values[0]
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer `output`.
    /// Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
        let layers = dims.len() - 1;
        let acts: Vec<Activation> = (0..layers)
            .map(|l| if l + 1 == layers { output } else { hidden })
            .collect();
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.uniform_range(-limit, limit)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Mlp {
            dims: dims.to_vec(),
            acts,
            params,
        }
    }

    pub fn from_parts(dims: Vec<usize>, acts: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(GentleError::config("an MLP needs at least one layer of positive width"));
        }
        if acts.len() != dims.len() - 1 {
            return Err(GentleError::Dimension {
                context: "Mlp activations",
                expected: dims.len() - 1,
                got: acts.len(),
            });
        }
        if params.len() != param_count(&dims) {
            return Err(GentleError::Dimension {
                context: "Mlp parameters",
                expected: param_count(&dims),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(GentleError::NonFinite("Mlp parameters"));
        }
        Ok(Mlp { dims, acts, params })
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.acts
    }

    pub fn num_layers(&self) -> usize {
        self.acts.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let off = self.offset(l);
        LayerView {
            fan_in,
            fan_out,
            weight: &self.params[off..off + fan_in * fan_out],
            bias: &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out],
            activation: self.acts[l],
        }
    }

    /// Single-example forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&x)?.into_vec())
    }

    /// Forward pass over a batch (one example per row).
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(GentleError::Dimension {
                context: "Mlp input",
                expected: self.in_dim(),
                got: x.cols(),
            });
        }
        let mut cur = x.clone();
        for l in 0..self.num_layers() {
            cur = self.layer_forward(l, &cur);
        }
        Ok(cur)
    }

    fn layer_forward(&self, l: usize, x: &Matrix) -> Matrix {
        let layer = self.layer(l);
        let b = x.rows();
        let mut out = Matrix::zeros(b, layer.fan_out);
        for r in 0..b {
            out.row_mut(r).copy_from_slice(layer.bias);
        }
        gemm(
            b,
            layer.fan_in,
            layer.fan_out,
            1.0,
            Operand::plain(x.data(), layer.fan_in),
            Operand::plain(layer.weight, layer.fan_out),
            1.0,
            out.data_mut(),
        );
        layer.activation.apply(out.data_mut());
        out
    }

    /// Forward pass that keeps every intermediate activation.
    ///
    /// Panics on an input width mismatch; callers build batches from the
    /// network's own dimensions.
    pub fn forward_tape(&self, x: Matrix) -> Tape {
        assert_eq!(x.cols(), self.in_dim(), "Mlp::forward_tape input width");
        let mut values = Vec::with_capacity(self.num_layers() + 1);
        values.push(x);
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, values.last().unwrap());
            values.push(next);
        }
        Tape { values }
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network
    /// output) and adds parameter gradients into `grads`. Returns the
    /// gradient w.r.t. the input when `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: Matrix,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Matrix> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let b = d_out.rows();
        let mut delta = d_out;
        for l in (0..self.num_layers()).rev() {
            let layer = self.layer(l);
            layer
                .activation
                .backprop(tape.values[l + 1].data(), delta.data_mut());
            let input = &tape.values[l];
            let off = self.offset(l);
            let (gw, rest) = grads[off..].split_at_mut(layer.fan_in * layer.fan_out);
            // dW += X^T * delta
            gemm(
                layer.fan_in,
                b,
                layer.fan_out,
                1.0,
                Operand::transposed(input.data(), layer.fan_in),
                Operand::plain(delta.data(), layer.fan_out),
                1.0,
                gw,
            );
            let gb = &mut rest[..layer.fan_out];
            for r in 0..b {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            if l == 0 && !want_input_grad {
                return None;
            }
            // dX = delta * W^T
            let mut dx = Matrix::zeros(b, layer.fan_in);
            gemm(
                b,
                layer.fan_out,
                layer.fan_in,
                1.0,
                Operand::plain(delta.data(), layer.fan_out),
                Operand::transposed(layer.weight, layer.fan_out),
                0.0,
                dx.data_mut(),
            );
            delta = dx;
        }
        Some(delta)
    }

    /// Value and analytic parameter gradient of a batch loss.
    ///
    /// `loss` maps the batch output to `(value, d value / d output)`; for a
    /// mean-over-batch loss the returned gradient must already carry the
    /// `1 / batch` factor.
    pub fn gradient<F>(&self, x: &Matrix, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&Matrix) -> (f64, Matrix),
    {
        if x.cols() != self.in_dim() {
            return Err(GentleError::Dimension {
                context: "Mlp input",
                expected: self.in_dim(),
                got: x.cols(),
            });
        }
        let tape = self.forward_tape(x.clone());
        let (value, d_out) = loss(tape.output());
        if d_out.rows() != x.rows() || d_out.cols() != self.out_dim() {
            return Err(GentleError::Dimension {
                context: "loss gradient",
                expected: x.rows() * self.out_dim(),
                got: d_out.rows() * d_out.cols(),
            });
        }
        let mut grads = self.zero_grads();
        self.backward(&tape, d_out, &mut grads, false);
        Ok((value, grads))
    }
}

/// Mean squared error over a batch, summed over output dimensions:
/// `(1/B) sum_b ||pred_b - target_b||^2`, with its output gradient.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    assert_eq!(
        (pred.rows(), pred.cols()),
        (target.rows(), target.cols()),
        "mse_loss shapes"
    );
    let n = pred.rows().max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d * d;
        *g = 2.0 * d / n;
    }
    (total / n, grad)
}

/// Polyak averaging: `target = (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) {
    assert_eq!(target.len(), online.len(), "soft_update shapes");
    for (t, &o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}
