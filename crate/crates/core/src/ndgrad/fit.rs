use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::adam::{AdamConfig, AdamState};
use super::mlp::Mlp;
use super::{NdError, Result};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Mean squared error over all output elements.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Minibatch Adam on mean squared error. Returns the mean training loss of
/// each epoch.
pub fn fit_mse(
    net: &mut Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &FitConfig,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(NdError::ShapeMismatch("fit_mse needs matching nonempty inputs and targets"));
    }
    let mut adam = AdamState::for_mlp(net, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (pred, tape) = net.forward(xb.view())?;
            total += mse(&pred, &yb) * chunk.len() as f64;
            let seed = (&pred - &yb) * (2.0 / pred.len() as f64);
            let grads = tape.backward(seed.view())?;
            drop(tape);
            adam.step_mlp(net, &grads)?;
        }
        let epoch_loss = total / x.nrows() as f64;
        if !epoch_loss.is_finite() {
            return Err(NdError::NonFinite("regression loss".into()));
        }
        curve.push(epoch_loss);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Activation;
    use crate::rng;

    #[test]
    fn fits_a_linear_map() {
        let mut r = rng::stream(1);
        let x = Array2::from_shape_fn((200, 2), |(i, j)| ((i * 7 + j * 3) % 23) as f64 / 11.0 - 1.0);
        let y = x.map_axis(Axis(1), |row| 2.0 * row[0] - row[1] + 0.5).insert_axis(Axis(1));
        let mut net = Mlp::new(&[2, 16, 1], Activation::Relu, &mut r).unwrap();
        let cfg = FitConfig { epochs: 300, batch: 32, lr: 1e-2 };
        let curve = fit_mse(&mut net, &x, &y, &cfg, &mut r).unwrap();
        assert!(curve.last().unwrap() < &1e-3, "{:?}", curve.last());
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
