use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::mlp::{Activation, Mlp};
use super::{NdError, Result};

/// One recorded primitive. Each op maps a batch matrix to a batch matrix.
#[derive(Clone, Debug)]
pub enum TapeOp {
    /// `y = x W_layer^T`; keeps `x`.
    MatMul { layer: usize, input: Array2<f64> },
    /// `y = x + b_layer`.
    AddBias { layer: usize },
    /// Elementwise nonlinearity; keeps the pre-activation.
    Activation { kind: Activation, pre: Array2<f64> },
    /// Row-wise `0.5 * ||x||^2`, producing one column.
    HalfNormSq { input: Array2<f64> },
    /// `y = factor * x`.
    Scale { factor: f64 },
}

/// Ordered record of a forward computation. Parameter ops refer to the
/// borrowed network, which therefore cannot change while the tape is alive.
#[derive(Clone, Debug)]
pub struct Tape<'n> {
    net: Option<&'n Mlp>,
    input_dim: usize,
    ops: Vec<TapeOp>,
    output: Array2<f64>,
}

/// Gradients of `sum(seed * output)`; parameter shapes mirror the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp, batch: usize) -> Self {
        Self {
            weights: net.weights().iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases().iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            input: Array2::zeros((batch, net.input_dim())),
        }
    }

    /// Parameter gradient slices in `W0, b0, W1, b1, ...` order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    /// `self += scale * other` over parameters only.
    pub fn add_scaled_params(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

impl<'n> Tape<'n> {
    pub(crate) fn from_ops(
        net: Option<&'n Mlp>,
        input_dim: usize,
        ops: Vec<TapeOp>,
        output: Array2<f64>,
    ) -> Self {
        Self {
            net,
            input_dim,
            ops,
            output,
        }
    }

    /// Parameter-free tape starting at `x`.
    pub fn leaf(x: Array2<f64>) -> Tape<'static> {
        Tape {
            net: None,
            input_dim: x.ncols(),
            ops: Vec::new(),
            output: x,
        }
    }

    pub fn ops(&self) -> &[TapeOp] {
        &self.ops
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn net(&self) -> Option<&'n Mlp> {
        self.net
    }

    /// Appends a row-wise `0.5 * ||x||^2`.
    pub fn half_norm_sq(mut self) -> Self {
        let input = std::mem::replace(&mut self.output, Array2::zeros((0, 0)));
        let y = input
            .map_axis(Axis(1), |row| 0.5 * row.dot(&row))
            .insert_axis(Axis(1));
        self.ops.push(TapeOp::HalfNormSq { input });
        self.output = y;
        self
    }

    pub fn scale(mut self, factor: f64) -> Self {
        self.output *= factor;
        self.ops.push(TapeOp::Scale { factor });
        self
    }

    /// Re-executes the recorded ops on `x` and checks the result is
    /// bit-identical to the recorded output.
    pub fn replay(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = x.to_owned();
        for op in &self.ops {
            h = match op {
                TapeOp::MatMul { layer, .. } => h.dot(&self.weights(*layer)?.t()),
                TapeOp::AddBias { layer } => {
                    let b = &self.net.ok_or(NdError::TapeMismatch("bias without network"))?.biases()[*layer];
                    h + b
                }
                TapeOp::Activation { kind, .. } => {
                    let k = *kind;
                    h.mapv(|v| k.apply(v))
                }
                TapeOp::HalfNormSq { .. } => h
                    .map_axis(Axis(1), |row| 0.5 * row.dot(&row))
                    .insert_axis(Axis(1)),
                TapeOp::Scale { factor } => h * *factor,
            };
        }
        if h.raw_dim() != self.output.raw_dim()
            || h.iter().zip(self.output.iter()).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(NdError::TapeMismatch("replay output differs from recording"));
        }
        Ok(h)
    }

    fn weights(&self, layer: usize) -> Result<&'n Array2<f64>> {
        self.net
            .map(|n| &n.weights()[layer])
            .ok_or(NdError::TapeMismatch("matmul without network"))
    }

    fn check_seed(&self, seed: &ArrayView2<f64>) -> Result<()> {
        if seed.raw_dim() != self.output.raw_dim() {
            return Err(NdError::SeedShape {
                expected: self.output.dim(),
                got: seed.dim(),
            });
        }
        Ok(())
    }

    /// Reverse pass: gradients of `sum(seed * output)` with respect to all
    /// parameters and the input.
    pub fn backward(&self, seed: ArrayView2<f64>) -> Result<Gradients> {
        self.check_seed(&seed)?;
        let mut grads = match self.net {
            Some(net) => Gradients::zeros_like(net, 0),
            None => Gradients {
                weights: vec![],
                biases: vec![],
                input: Array2::zeros((0, 0)),
            },
        };
        grads.input = self.reverse(seed, Some(&mut grads), None)?;
        Ok(grads)
    }

    /// Reverse pass for the input gradient only (skips parameter products).
    pub fn backward_input(&self, seed: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_seed(&seed)?;
        self.reverse(seed, None, None)
    }

    /// Shared reverse sweep. When `deltas` is provided, the gradient flowing
    /// into each bias op (the gradient w.r.t. that layer's pre-activation) is
    /// captured in layer order.
    pub(crate) fn reverse(
        &self,
        seed: ArrayView2<f64>,
        mut params: Option<&mut Gradients>,
        mut deltas: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Array2<f64>> {
        let mut g = seed.to_owned();
        for op in self.ops.iter().rev() {
            match op {
                TapeOp::Scale { factor } => g *= *factor,
                TapeOp::HalfNormSq { input } => {
                    let col = g.column(0).to_owned();
                    let mut gi = input.clone();
                    Zip::from(gi.rows_mut()).and(&col).for_each(|mut row, &c| row *= c);
                    g = gi;
                }
                TapeOp::Activation { kind, pre } => {
                    let k = *kind;
                    if k != Activation::Identity {
                        Zip::from(&mut g).and(pre).for_each(|gv, &p| *gv *= k.derivative(p));
                    }
                }
                TapeOp::AddBias { layer } => {
                    if let Some(p) = params.as_deref_mut() {
                        p.biases[*layer] += &g.sum_axis(Axis(0));
                    }
                    if let Some(d) = deltas.as_deref_mut() {
                        d.push(g.clone());
                    }
                }
                TapeOp::MatMul { layer, input } => {
                    let w = self.weights(*layer)?;
                    if let Some(p) = params.as_deref_mut() {
                        ndarray::linalg::general_mat_mul(1.0, &g.t(), input, 1.0, &mut p.weights[*layer]);
                    }
                    g = g.dot(w);
                }
            }
        }
        if g.ncols() != self.input_dim {
            return Err(NdError::TapeMismatch("input gradient width"));
        }
        if let Some(d) = deltas {
            d.reverse();
        }
        Ok(g)
    }
}
