//! Second-order pass for penalties on input gradients.
//!
//! For a scalar-output MLP with piecewise-linear hidden activations, the
//! input gradient is `G0 = D0 W0` with `D_k = (D_{k+1} W_{k+1}) * mask_k` and
//! `D_last = 1`. Masks are locally constant, so the gradient of any penalty
//! `P(G0)` with respect to the weights follows from one forward sweep over
//! the layers:
//!
//! ```text
//! Gbar_0 = dP/dG0
//! dP/dW_k = D_k^T Gbar_k
//! Gbar_{k+1} = (Gbar_k W_k^T) * mask_k
//! ```
//!
//! Biases do not enter `G0`, so their gradient is zero.

use ndarray::{Array2, ArrayView2, Zip};

use super::mlp::Activation;
use super::tape::{Gradients, Tape, TapeOp};
use super::{NdError, Result};

/// Input gradient of a scalar-output network plus the per-layer
/// pre-activation gradients needed for the second-order pass.
#[derive(Clone, Debug)]
pub struct ScalarInputGrad {
    pub input: Array2<f64>,
    deltas: Vec<Array2<f64>>,
}

impl<'n> Tape<'n> {
    fn check_mlp_structure(&self) -> Result<()> {
        let net = self.net().ok_or(NdError::TapeMismatch("no network on tape"))?;
        if net.output_dim() != 1 {
            return Err(NdError::Unsupported("input-gradient VJP needs a scalar output"));
        }
        if !net.activation().is_piecewise_linear() {
            return Err(NdError::Unsupported("input-gradient VJP needs piecewise-linear activations"));
        }
        let expected = 3 * net.n_layers() - 1;
        if self.ops().len() != expected {
            return Err(NdError::TapeMismatch("tape is not a bare MLP forward"));
        }
        Ok(())
    }

    /// Gradient of each row's scalar output with respect to that row's input.
    pub fn scalar_input_gradient(&self) -> Result<ScalarInputGrad> {
        self.check_mlp_structure()?;
        let seed = Array2::ones(self.output().raw_dim());
        let mut deltas = Vec::new();
        let input = self.reverse(seed.view(), None, Some(&mut deltas))?;
        Ok(ScalarInputGrad { input, deltas })
    }

    /// Gradient over parameters of `sum(v * input_gradient)`.
    pub fn input_gradient_vjp(&self, grad: &ScalarInputGrad, v: ArrayView2<f64>) -> Result<Gradients> {
        self.check_mlp_structure()?;
        let net = self.net().unwrap();
        if v.raw_dim() != grad.input.raw_dim() {
            return Err(NdError::SeedShape {
                expected: grad.input.dim(),
                got: v.dim(),
            });
        }
        let masks: Vec<&Array2<f64>> = self
            .ops()
            .iter()
            .filter_map(|op| match op {
                TapeOp::Activation { pre, .. } => Some(pre),
                _ => None,
            })
            .collect();
        let mut out = Gradients::zeros_like(net, 0);
        let mut gbar = v.to_owned();
        let last = net.n_layers() - 1;
        for k in 0..=last {
            ndarray::linalg::general_mat_mul(1.0, &grad.deltas[k].t(), &gbar, 0.0, &mut out.weights[k]);
            if k < last {
                let mut next = gbar.dot(&net.weights()[k].t());
                if net.activation() == Activation::Relu {
                    Zip::from(&mut next).and(masks[k]).for_each(|g, &p| {
                        if p <= 0.0 {
                            *g = 0.0
                        }
                    });
                }
                gbar = next;
            }
        }
        out.input = Array2::zeros((0, 0));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{finite_diff_check, Mlp};
    use crate::rng;
    use ndarray::{array, s};

    fn penalty(net: &Mlp, x: &Array2<f64>) -> f64 {
        let (_, g) = net.input_gradient(x.view()).unwrap();
        // weighted squared norm of the gradient's last two columns
        g.slice(s![.., 1..]).iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..3 {
            let mut r = rng::stream(100 + seed);
            let net = Mlp::new(&[3, 6, 5, 1], Activation::Relu, &mut r).unwrap();
            let x = array![[0.4, -0.3, 0.9], [-0.7, 0.2, 0.1], [1.1, 0.5, -0.6]];
            let (_, tape) = net.forward(x.view()).unwrap();
            let sig = tape.scalar_input_gradient().unwrap();
            let mut v = 2.0 * &sig.input;
            v.column_mut(0).fill(0.0);
            let analytic = tape.input_gradient_vjp(&sig, v.view()).unwrap();
            let flat: Vec<f64> = analytic.params().concat();
            drop(tape);
            let theta0: Vec<f64> = net.params().concat();
            let report = finite_diff_check(
                |theta: &[f64]| {
                    let mut n = net.clone();
                    let mut off = 0;
                    for p in n.params_mut() {
                        p.copy_from_slice(&theta[off..off + p.len()]);
                        off += p.len();
                    }
                    Some(penalty(&n, &x))
                },
                &flat,
                &theta0,
                1e-5,
            );
            assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn tanh_is_rejected() {
        let mut r = rng::stream(1);
        let net = Mlp::new(&[2, 3, 1], Activation::Tanh, &mut r).unwrap();
        let (_, tape) = net.forward(array![[0.1, 0.2]].view()).unwrap();
        assert!(matches!(tape.scalar_input_gradient(), Err(NdError::Unsupported(_))));
    }
}
