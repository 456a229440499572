use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, TapeOp};
use super::{NdError, Result};
use crate::rng::Stream;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            // subgradient at 0 is 0, see `derivative`
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// True when the derivative is piecewise constant, which is what the
    /// input-gradient parameter VJP relies on.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense feed-forward network. Layer `k` maps `layer_dims[k]` to
/// `layer_dims[k + 1]`; its weight matrix has shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        for w in net.weights.iter_mut() {
            let (fan_out, fan_in) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(NdError::InvalidArchitecture(layer_dims.to_vec()));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NdError::InvalidArchitecture(vec![]));
        }
        let mut dims = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(NdError::InvalidArchitecture(dims));
            }
            dims.push(w.nrows());
        }
        let net = Self {
            layer_dims: dims,
            weights,
            biases,
            activation,
        };
        if !net.is_finite() {
            return Err(NdError::NonFinite("parameters".into()));
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Parameter slices in the order `W0, b0, W1, b1, ...`.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * src`.
    pub fn soft_update_from(&mut self, src: &Mlp, tau: f64) {
        debug_assert_eq!(self.layer_dims, src.layer_dims);
        for (dst, s) in self.params_mut().into_iter().zip(src.params()) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d = (1.0 - tau) * *d + tau * v;
            }
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NdError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass (one sample per row) with a tape for `backward`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape<'_>)> {
        self.check_input(&x)?;
        let mut ops = Vec::with_capacity(3 * self.n_layers());
        let mut h = x.to_owned();
        let last = self.n_layers() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = h.dot(&w.t());
            ops.push(TapeOp::MatMul { layer: k, input: h });
            a += b;
            ops.push(TapeOp::AddBias { layer: k });
            if k < last {
                let act = self.activation;
                h = a.mapv(|v| act.apply(v));
                ops.push(TapeOp::Activation { kind: act, pre: a });
            } else {
                h = a;
            }
        }
        let tape = Tape::from_ops(Some(self), self.input_dim(), ops, h.clone());
        Ok((h, tape))
    }

    /// Single-sample forward pass.
    pub fn forward_vec(&self, x: &[f64]) -> Result<(Vec<f64>, Tape<'_>)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (y, tape) = self.forward(view)?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.n_layers() - 1;
        let mut h = x.dot(&self.weights[0].t());
        h += &self.biases[0];
        for k in 1..=last {
            let act = self.activation;
            h.mapv_inplace(|v| act.apply(v));
            let mut a = h.dot(&self.weights[k].t());
            a += &self.biases[k];
            h = a;
        }
        Ok(h)
    }

    pub fn predict_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of a scalar-output network with respect to its input rows.
    pub fn input_gradient(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let (y, tape) = self.forward(x)?;
        let seed = Array2::ones(y.raw_dim());
        let g = tape.backward_input(seed.view())?;
        Ok((y.index_axis_move(Axis(1), 0), g))
    }
}
