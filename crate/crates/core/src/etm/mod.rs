//! Conditional energy-based transition models.
//!
//! Public energy functions take raw coordinates. Langevin chains in state
//! space run on the z-scored next state `u = (s' - mean) / std`, which is a
//! fixed affine reparametrization of the same energy.

mod ensemble;
mod langevin;
mod train;

pub use ensemble::{
    train_ensemble, train_regressor, EnergyEnsemble, InferenceInit, Regressor, RegressorConfig,
};
pub use langevin::{langevin, ChainParams, ChainRun, LangevinConfig};
pub use train::{
    gradient_penalty, infonce, infonce_loss, mpd_negatives, positive_rank_first_rate, sample_negatives,
    train_etm, EtmConfig, EtmLog, MpdConfig, NegativeKind,
};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::manifold::{AutoEncoder, ManifoldError};
use crate::ndgrad::{Activation, Mlp, NdError};
use crate::norm::Standardizer;
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum EtmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("langevin chain produced a non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<EnergyModel> },
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, EtmError>;

/// `E(s, a, s')` as an MLP over the concatenated z-scored inputs.
#[derive(Clone, Debug)]
pub struct EnergyModel {
    net: Mlp,
    norm_s: Standardizer,
    norm_a: Standardizer,
    norm_sp: Standardizer,
}

impl EnergyModel {
    pub fn new(
        hidden: &[usize],
        norm_s: Standardizer,
        norm_a: Standardizer,
        norm_sp: Standardizer,
        rng: &mut Stream,
    ) -> Result<Self> {
        let dims = Self::dims(norm_s.dim(), norm_a.dim(), hidden);
        Ok(Self {
            net: Mlp::new(&dims, Activation::Relu, rng)?,
            norm_s,
            norm_a,
            norm_sp,
        })
    }

    pub fn zeros(ds: usize, da: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::zeros(&Self::dims(ds, da, hidden), Activation::Relu)?,
            norm_s: Standardizer::identity(ds),
            norm_a: Standardizer::identity(da),
            norm_sp: Standardizer::identity(ds),
        })
    }

    pub fn from_parts(net: Mlp, norm_s: Standardizer, norm_a: Standardizer, norm_sp: Standardizer) -> Result<Self> {
        let want = 2 * norm_s.dim() + norm_a.dim();
        if net.input_dim() != want || net.output_dim() != 1 || norm_sp.dim() != norm_s.dim() {
            return Err(EtmError::DimensionMismatch {
                expected: want,
                got: net.input_dim(),
            });
        }
        Ok(Self {
            net,
            norm_s,
            norm_a,
            norm_sp,
        })
    }

    fn dims(ds: usize, da: usize, hidden: &[usize]) -> Vec<usize> {
        let mut d = vec![2 * ds + da];
        d.extend(hidden);
        d.push(1);
        d
    }

    pub fn ds(&self) -> usize {
        self.norm_s.dim()
    }

    pub fn da(&self) -> usize {
        self.norm_a.dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn norm_sp(&self) -> &Standardizer {
        &self.norm_sp
    }

    pub fn normalizers(&self) -> [&Standardizer; 3] {
        [&self.norm_s, &self.norm_a, &self.norm_sp]
    }

    fn check(&self, s: &ArrayView2<f64>, a: &ArrayView2<f64>, rows: usize) -> Result<()> {
        for (got, expected) in [(s.ncols(), self.ds()), (a.ncols(), self.da())] {
            if got != expected {
                return Err(EtmError::DimensionMismatch { expected, got });
            }
        }
        for got in [s.nrows(), a.nrows()] {
            if got != rows {
                return Err(EtmError::DimensionMismatch { expected: rows, got });
            }
        }
        Ok(())
    }

    /// Normalized `[s, a]` block used as the fixed conditioning context.
    pub(crate) fn context(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&s, &a, s.nrows())?;
        Ok(concatenate![Axis(1), self.norm_s.apply(s), self.norm_a.apply(a)])
    }

    pub(crate) fn to_u(&self, s_next: ArrayView2<f64>) -> Array2<f64> {
        self.norm_sp.apply(s_next)
    }

    pub(crate) fn from_u(&self, u: ArrayView2<f64>) -> Array2<f64> {
        self.norm_sp.invert(u)
    }

    /// Energies and gradients w.r.t. the normalized next state.
    pub(crate) fn field_u(&self, ctx: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = concatenate![Axis(1), ctx, u];
        let (e, tape) = self.net.forward(x.view())?;
        let g = tape.backward_input(Array2::ones(e.raw_dim()).view())?;
        let off = ctx.ncols();
        Ok((e.column(0).to_owned(), g.slice(s![.., off..]).to_owned()))
    }

    pub(crate) fn energy_u(&self, ctx: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = concatenate![Axis(1), ctx, u];
        Ok(self.net.predict(x.view())?.column(0).to_owned())
    }

    /// Row-wise energies in raw coordinates.
    pub fn energy_batch(&self, s: ArrayView2<f64>, a: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<Array1<f64>> {
        if s_next.ncols() != self.ds() {
            return Err(EtmError::DimensionMismatch {
                expected: self.ds(),
                got: s_next.ncols(),
            });
        }
        let ctx = self.context(s, a)?;
        self.energy_u(ctx.view(), self.to_u(s_next).view())
    }

    pub fn energy(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        let (s, a, sp) = (row(s), row(a), row(s_next));
        Ok(self.energy_batch(s, a, sp)?[0])
    }

    /// Energies and gradients w.r.t. the raw next state.
    pub fn energy_grad(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        s_next: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let ctx = self.context(s, a)?;
        let (e, g) = self.field_u(ctx.view(), self.to_u(s_next).view())?;
        Ok((e, self.norm_sp.pullback(g.view())))
    }
}

pub(crate) fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("slice")
}

fn tether(z: ArrayView2<f64>, z_tilde: ArrayView2<f64>, sigma: f64) -> (Array1<f64>, Array2<f64>) {
    let d = &z - &z_tilde;
    let inv = 1.0 / (sigma * sigma);
    let val = d.map_axis(Axis(1), |r| 0.5 * inv * r.dot(&r));
    (val, d * inv)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(EtmError::Config(format!("sigma must be > 0, got {sigma}")))
    }
}

/// `H(z; s, a) = E(s, a, f_d(z))`.
pub fn latent_energy(
    m: &EnergyModel,
    ae: &AutoEncoder,
    z: ArrayView2<f64>,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    m.energy_batch(s, a, ae.decode_batch(z)?.view())
}

/// `H` and its gradient w.r.t. `z`.
pub fn latent_energy_grad(
    m: &EnergyModel,
    ae: &AutoEncoder,
    z: ArrayView2<f64>,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let ctx = m.context(s, a)?;
    latent_field(m, ae, ctx.view(), z)
}

pub(crate) fn latent_field(
    m: &EnergyModel,
    ae: &AutoEncoder,
    ctx: ArrayView2<f64>,
    z: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (sp, tape) = ae.decode_tape(z)?;
    let (e, g_u) = m.field_u(ctx, m.to_u(sp.view()).view())?;
    let g_raw = m.norm_sp.pullback(g_u.view());
    Ok((e, ae.decode_vjp(&tape, g_raw.view())?))
}

/// `H(z) + ||z - z_tilde||^2 / (2 sigma^2)` and its gradient.
pub fn conditional_latent_energy(
    m: &EnergyModel,
    ae: &AutoEncoder,
    z: ArrayView2<f64>,
    z_tilde: ArrayView2<f64>,
    sigma: f64,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_sigma(sigma)?;
    let (h, g) = latent_energy_grad(m, ae, z, s, a)?;
    let (t, gt) = tether(z, z_tilde, sigma);
    Ok((h + t, g + gt))
}

/// `E(s, a, s') + ||f_e(s') - z_tilde||^2 / (2 sigma^2)` and its gradient
/// w.r.t. the raw `s'`.
pub fn conditional_ambient_energy(
    m: &EnergyModel,
    ae: &AutoEncoder,
    s_next: ArrayView2<f64>,
    z_tilde: ArrayView2<f64>,
    sigma: f64,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_sigma(sigma)?;
    let (e, g) = m.energy_grad(s, a, s_next)?;
    let (z, tape) = ae.encode_tape(s_next)?;
    let (t, gt) = tether(z.view(), z_tilde, sigma);
    let g_s = ae.encode_vjp(&tape, gt.view())?;
    Ok((e + t, g + g_s))
}

/// Tethered ambient field on normalized `u`.
pub(crate) fn ambient_tethered_field_u(
    m: &EnergyModel,
    ae: &AutoEncoder,
    ctx: ArrayView2<f64>,
    u: ArrayView2<f64>,
    z_tilde: ArrayView2<f64>,
    sigma: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (e, g_u) = m.field_u(ctx, u)?;
    let sp = m.from_u(u);
    let (z, tape) = ae.encode_tape(sp.view())?;
    let (t, gt) = tether(z.view(), z_tilde, sigma);
    let g_raw = ae.encode_vjp(&tape, gt.view())?;
    Ok((e + t, g_u + g_raw * &m.norm_sp.std))
}

/// Tether directly on `u`; the manifold-free analogue used for one-dimensional
/// states.
pub(crate) fn plain_tethered_field_u(
    m: &EnergyModel,
    ctx: ArrayView2<f64>,
    u: ArrayView2<f64>,
    u_tilde: ArrayView2<f64>,
    sigma: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (e, g) = m.field_u(ctx, u)?;
    let (t, gt) = tether(u, u_tilde, sigma);
    Ok((e + t, g + gt))
}

/// Repeats every row of `x` `k` times in place order.
pub(crate) fn repeat_rows(x: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..x.nrows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    x.select(Axis(0), &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::AeConfig;
    use crate::ndgrad::finite_diff_check;
    use crate::rng;
    use ndarray::array;

    fn random_model(seed: u64, ds: usize, da: usize) -> EnergyModel {
        let mut r = rng::stream(seed);
        let n = |d: usize, off: f64| Standardizer {
            mean: Array1::from_elem(d, off),
            std: Array1::from_shape_fn(d, |i| 0.5 + 0.25 * i as f64),
        };
        EnergyModel::new(&[16, 12], n(ds, 0.1), n(da, -0.2), n(ds, 0.3), &mut r).unwrap()
    }

    fn random_ae(seed: u64, ds: usize, d_m: usize) -> AutoEncoder {
        let mut r = rng::stream(seed);
        let cfg = AeConfig {
            d_m,
            hidden: vec![10, 8],
            ..AeConfig::default()
        };
        let norm = Standardizer {
            mean: Array1::from_elem(ds, 0.05),
            std: Array1::from_shape_fn(ds, |i| 0.4 + 0.2 * i as f64),
        };
        AutoEncoder::new(ds, &cfg, norm, &mut r).unwrap()
    }

    #[test]
    fn zero_net_and_batch_permutation() {
        let m = EnergyModel::zeros(2, 1, &[4]).unwrap();
        assert_eq!(m.energy(&[1.0, 2.0], &[0.5], &[3.0, -1.0]).unwrap(), 0.0);
        let m = random_model(1, 2, 1);
        let s = array![[0.1, 0.2], [0.3, -0.4], [1.0, 0.0]];
        let a = array![[0.5], [-0.5], [0.2]];
        let sp = array![[0.0, 1.0], [0.4, 0.4], [-1.0, 0.3]];
        let e = m.energy_batch(s.view(), a.view(), sp.view()).unwrap();
        let p = [2, 0, 1];
        let ep = m
            .energy_batch(s.select(Axis(0), &p).view(), a.select(Axis(0), &p).view(), sp.select(Axis(0), &p).view())
            .unwrap();
        for (k, &i) in p.iter().enumerate() {
            assert_eq!(ep[k], e[i]);
        }
        assert!(matches!(
            m.energy(&[0.0], &[0.0], &[0.0, 0.0]),
            Err(EtmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn latent_energy_is_energy_of_decoded_state() {
        let m = random_model(2, 4, 2);
        let ae = random_ae(3, 4, 2);
        let mut r = rng::stream(4);
        let z = Array2::from_shape_fn((100, 2), |_| rng::normal(&mut r));
        let s = Array2::from_shape_fn((100, 4), |_| rng::normal(&mut r));
        let a = Array2::from_shape_fn((100, 2), |_| rng::normal(&mut r));
        let h = latent_energy(&m, &ae, z.view(), s.view(), a.view()).unwrap();
        let e = m
            .energy_batch(s.view(), a.view(), ae.decode_batch(z.view()).unwrap().view())
            .unwrap();
        assert_eq!(h, e);
        let (hg, _) = latent_energy_grad(&m, &ae, z.view(), s.view(), a.view()).unwrap();
        assert_eq!(hg, e);
    }

    #[test]
    fn tethers_vanish_and_closed_forms() {
        let m = random_model(5, 3, 1);
        let ae = random_ae(6, 3, 2);
        let s = array![[0.2, -0.1, 0.4]];
        let a = array![[0.3]];
        let z = array![[0.5, -0.25]];
        let h = latent_energy(&m, &ae, z.view(), s.view(), a.view()).unwrap();
        let (hc, _) = conditional_latent_energy(&m, &ae, z.view(), z.view(), 0.3, s.view(), a.view()).unwrap();
        assert_eq!(h, hc);
        let sp = array![[0.1, 0.9, -0.3]];
        let zt = ae.encode_batch(sp.view()).unwrap();
        let e = m.energy_batch(s.view(), a.view(), sp.view()).unwrap();
        let (ec, _) = conditional_ambient_energy(&m, &ae, sp.view(), zt.view(), 0.3, s.view(), a.view()).unwrap();
        assert_eq!(e, ec);

        let zero = EnergyModel::zeros(3, 1, &[4]).unwrap();
        let sigma = 0.7;
        let zt = array![[0.5 + sigma, -0.25]];
        let (v, _) = conditional_latent_energy(&zero, &ae, z.view(), zt.view(), sigma, s.view(), a.view()).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12);
        let zero_ae = AutoEncoder::zeros(3, 2, &[4]).unwrap();
        let zt = array![[2.0 * sigma, 0.0]];
        let (v, _) = conditional_ambient_energy(&zero, &zero_ae, sp.view(), zt.view(), sigma, s.view(), a.view()).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!(matches!(
            conditional_latent_energy(&m, &ae, z.view(), z.view(), 0.0, s.view(), a.view()),
            Err(EtmError::Config(_))
        ));
        assert!(conditional_ambient_energy(&m, &ae, sp.view(), z.view(), -1.0, s.view(), a.view()).is_err());
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64]) -> f64 {
        finite_diff_check(|v: &[f64]| Some(f(v)), grad, x, 1e-6).max_rel_error
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        for seed in 0..3 {
            let m = random_model(10 + seed, 3, 2);
            let ae = random_ae(20 + seed, 3, 2);
            let s = array![[0.2, -0.1, 0.4]];
            let a = array![[0.3, -0.6]];
            let sp = array![[0.15, 0.8, -0.35]];
            let (_, g) = m.energy_grad(s.view(), a.view(), sp.view()).unwrap();
            let err = fd_check(
                |x| m.energy_batch(s.view(), a.view(), row(x)).unwrap()[0],
                g.as_slice().unwrap(),
                sp.as_slice().unwrap(),
            );
            assert!(err < 1e-4, "ambient {err}");

            let z = array![[0.4, -0.7]];
            let zt = array![[0.1, -0.5]];
            let (_, g) = latent_energy_grad(&m, &ae, z.view(), s.view(), a.view()).unwrap();
            let err = fd_check(
                |x| latent_energy(&m, &ae, row(x), s.view(), a.view()).unwrap()[0],
                g.as_slice().unwrap(),
                z.as_slice().unwrap(),
            );
            assert!(err < 1e-4, "latent {err}");

            let (_, g) = conditional_latent_energy(&m, &ae, z.view(), zt.view(), 0.5, s.view(), a.view()).unwrap();
            let err = fd_check(
                |x| conditional_latent_energy(&m, &ae, row(x), zt.view(), 0.5, s.view(), a.view()).unwrap().0[0],
                g.as_slice().unwrap(),
                z.as_slice().unwrap(),
            );
            assert!(err < 1e-4, "conditional latent {err}");

            let (_, g) = conditional_ambient_energy(&m, &ae, sp.view(), zt.view(), 0.5, s.view(), a.view()).unwrap();
            let err = fd_check(
                |x| conditional_ambient_energy(&m, &ae, row(x), zt.view(), 0.5, s.view(), a.view()).unwrap().0[0],
                g.as_slice().unwrap(),
                sp.as_slice().unwrap(),
            );
            assert!(err < 1e-4, "conditional ambient {err}");
        }
    }

    #[test]
    fn normalized_tethered_field_matches_raw_version() {
        let m = random_model(30, 3, 2);
        let ae = random_ae(31, 3, 2);
        let s = array![[0.2, -0.1, 0.4]];
        let a = array![[0.3, -0.6]];
        let sp = array![[0.15, 0.8, -0.35]];
        let zt = array![[0.1, -0.5]];
        let (e_raw, g_raw) = conditional_ambient_energy(&m, &ae, sp.view(), zt.view(), 0.4, s.view(), a.view()).unwrap();
        let ctx = m.context(s.view(), a.view()).unwrap();
        let u = m.to_u(sp.view());
        let (e_u, g_u) = ambient_tethered_field_u(&m, &ae, ctx.view(), u.view(), zt.view(), 0.4).unwrap();
        assert!((e_raw[0] - e_u[0]).abs() < 1e-12);
        let back = &g_u / &m.norm_sp().std;
        assert!(back.iter().zip(g_raw.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
    }
}
