use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::langevin::{langevin, ChainParams, LangevinConfig};
use super::{
    ambient_tethered_field_u, latent_field, plain_tethered_field_u, repeat_rows, row, tether, EnergyModel, EtmError,
    Result,
};
use crate::envdata::Dataset;
use crate::manifold::AutoEncoder;
use crate::ndgrad::{AdamConfig, AdamState};
use crate::norm::Standardizer;
use crate::rng::{self, Stream};

/// How training negatives are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NegativeKind {
    /// Latent diffusion plus tethered two-stage Langevin.
    Mpd,
    /// Isotropic noise of the given scale around the positive in
    /// normalized state space, refined by untethered ambient Langevin.
    Gaussian { sigma: f64 },
    /// Standard normal draws in normalized state space, independent of the
    /// positive, refined by untethered ambient Langevin.
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpdConfig {
    pub sigma: f64,
    pub n_negatives: usize,
    pub chain: LangevinConfig,
    pub grad_margin: f64,
    pub grad_weight: f64,
}

impl Default for MpdConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            n_negatives: 20,
            chain: LangevinConfig {
                steps_latent: 10,
                steps_ambient: 10,
                ..LangevinConfig::default()
            },
            grad_margin: 5.0,
            grad_weight: 1.0,
        }
    }
}

impl MpdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(EtmError::Config("need at least one negative".into()));
        }
        if !(self.sigma > 0.0) || !(self.grad_margin > 0.0) || !(self.grad_weight >= 0.0) {
            return Err(EtmError::Config(format!("invalid negative-sampling config {self:?}")));
        }
        self.chain.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtmConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub mpd: MpdConfig,
    pub negatives: NegativeKind,
    pub seed: u64,
}

impl Default for EtmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200; 4],
            epochs: 100,
            batch: 1024,
            lr: 1e-3,
            mpd: MpdConfig::default(),
            negatives: NegativeKind::Mpd,
            seed: 0,
        }
    }
}

/// Per-epoch mean InfoNCE loss and mean gradient penalty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EtmLog {
    pub loss_nce: Vec<f64>,
    pub loss_grad: Vec<f64>,
}

impl EtmLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_nce,loss_grad\n");
        for (i, (n, g)) in self.loss_nce.iter().zip(&self.loss_grad).enumerate() {
            out.push_str(&format!("{i},{n:.10e},{g:.10e}\n"));
        }
        out
    }
}

/// InfoNCE over `energies`, whose first entry is the positive:
/// `E_0 + log sum_i exp(-E_i)`. Returns the loss and `dL/dE`.
pub fn infonce(energies: &[f64]) -> (f64, Vec<f64>) {
    let (top, m) = energies
        .iter()
        .map(|e| -e)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let w: Vec<f64> = energies.iter().map(|e| (-e - m).exp()).collect();
    // the top term is exactly 1; summing the rest separately keeps ln_1p accurate
    let rest: f64 = w.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| v).sum();
    let z = 1.0 + rest;
    let loss = energies[0] + m + rest.ln_1p();
    let mut grad: Vec<f64> = w.iter().map(|wi| -wi / z).collect();
    grad[0] += 1.0;
    (loss, grad)
}

/// InfoNCE loss of one transition against its raw-coordinate negatives.
pub fn infonce_loss(
    m: &EnergyModel,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
    negatives: ArrayView2<f64>,
) -> Result<f64> {
    if negatives.nrows() == 0 {
        return Err(EtmError::Config("need at least one negative".into()));
    }
    let cands = concatenate![Axis(0), row(s_next), negatives];
    let k = cands.nrows();
    let e = m.energy_batch(repeat_rows(row(s), k).view(), repeat_rows(row(a), k).view(), cands.view())?;
    Ok(infonce(e.as_slice().unwrap()).0)
}

/// `sum_i max(0, ||g_i|| - margin)^2` and its derivative w.r.t. each `g_i`.
fn penalty_terms(g: ArrayView2<f64>, margin: f64) -> (f64, Array2<f64>) {
    let mut total = 0.0;
    let mut v = Array2::zeros(g.raw_dim());
    for (i, gi) in g.rows().into_iter().enumerate() {
        let n = gi.dot(&gi).sqrt();
        if n > margin {
            total += (n - margin).powi(2);
            let c = 2.0 * (n - margin) / n;
            v.row_mut(i).assign(&(&gi * c));
        }
    }
    (total, v)
}

/// Hinge gradient penalty summed over candidate rows. The gradient is taken
/// w.r.t. the network's next-state input, i.e. in normalized coordinates.
pub fn gradient_penalty(
    m: &EnergyModel,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    margin: f64,
) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(EtmError::Config(format!("margin must be > 0, got {margin}")));
    }
    let ctx = m.context(s, a)?;
    let (_, g) = m.field_u(ctx.view(), m.to_u(candidates).view())?;
    Ok(penalty_terms(g.view(), margin).0)
}

/// Negatives in normalized next-state coordinates, `n` per row, row-major.
pub(crate) fn negatives_u(
    m: &EnergyModel,
    ae: Option<&AutoEncoder>,
    ctx: ArrayView2<f64>,
    s_next: ArrayView2<f64>,
    n: usize,
    kind: NegativeKind,
    mpd: &MpdConfig,
    rng: &mut Stream,
) -> Result<Array2<f64>> {
    let ctx_rep = repeat_rows(ctx, n);
    let sigma = mpd.sigma;
    let chain = &mpd.chain;
    match (kind, ae) {
        (NegativeKind::Mpd, Some(ae)) => {
            let z_pos = repeat_rows(ae.encode_batch(s_next)?.view(), n);
            let z_tilde = &z_pos + &gaussian(z_pos.raw_dim(), sigma, rng);
            let z_minus = if chain.steps_latent > 0 {
                let field = |z: ArrayView2<f64>| {
                    let (h, g) = latent_field(m, ae, ctx_rep.view(), z)?;
                    let (t, gt) = tether(z, z_tilde.view(), sigma);
                    Ok((h + t, g + gt))
                };
                langevin(field, z_tilde.clone(), &chain.latent(), rng, false)?.x
            } else {
                z_tilde.clone()
            };
            let u0 = m.to_u(ae.decode_batch(z_minus.view())?.view());
            if chain.steps_ambient == 0 {
                return Ok(u0);
            }
            let field = |u: ArrayView2<f64>| ambient_tethered_field_u(m, ae, ctx_rep.view(), u, z_tilde.view(), sigma);
            Ok(langevin(field, u0, &chain.ambient(), rng, false)?.x)
        }
        (NegativeKind::Mpd, None) => {
            let u_pos = repeat_rows(m.to_u(s_next).view(), n);
            let u_tilde = &u_pos + &gaussian(u_pos.raw_dim(), sigma, rng);
            let params = ChainParams {
                steps: chain.steps_latent + chain.steps_ambient,
                ..chain.ambient()
            };
            if params.steps == 0 {
                return Ok(u_tilde);
            }
            let field = |u: ArrayView2<f64>| plain_tethered_field_u(m, ctx_rep.view(), u, u_tilde.view(), sigma);
            Ok(langevin(field, u_tilde.clone(), &params, rng, false)?.x)
        }
        (NegativeKind::Gaussian { .. } | NegativeKind::Noise, _) => {
            let u_pos = repeat_rows(m.to_u(s_next).view(), n);
            let u0 = match kind {
                NegativeKind::Gaussian { sigma: g } => &u_pos + &gaussian(u_pos.raw_dim(), g, rng),
                _ => gaussian(u_pos.raw_dim(), 1.0, rng),
            };
            if chain.steps_ambient == 0 {
                return Ok(u0);
            }
            let field = |u: ArrayView2<f64>| m.field_u(ctx_rep.view(), u);
            Ok(langevin(field, u0, &chain.ambient(), rng, false)?.x)
        }
    }
}

fn gaussian(dim: ndarray::Ix2, sigma: f64, rng: &mut Stream) -> Array2<f64> {
    Array2::from_shape_fn(dim, |_| sigma * rng::normal(rng))
}

/// Raw-coordinate negatives for a batch, `n` per row in row-major order.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives(
    m: &EnergyModel,
    ae: Option<&AutoEncoder>,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    s_next: ArrayView2<f64>,
    kind: NegativeKind,
    mpd: &MpdConfig,
    rng: &mut Stream,
) -> Result<Array2<f64>> {
    mpd.validate()?;
    let ctx = m.context(s, a)?;
    let u = negatives_u(m, ae, ctx.view(), s_next, mpd.n_negatives, kind, mpd, rng)?;
    Ok(m.from_u(u.view()))
}

/// `n_negatives` manifold projection-diffusion negatives for one transition.
pub fn mpd_negatives(
    m: &EnergyModel,
    ae: &AutoEncoder,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
    mpd: &MpdConfig,
    rng: &mut Stream,
) -> Result<Array2<f64>> {
    sample_negatives(m, Some(ae), row(s), row(a), row(s_next), NegativeKind::Mpd, mpd, rng)
}

/// Fraction of rows whose positive has strictly the lowest energy among its
/// candidate set.
#[allow(clippy::too_many_arguments)]
pub fn positive_rank_first_rate(
    m: &EnergyModel,
    ae: Option<&AutoEncoder>,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    s_next: ArrayView2<f64>,
    kind: NegativeKind,
    mpd: &MpdConfig,
    rng: &mut Stream,
) -> Result<f64> {
    let n = mpd.n_negatives;
    let negs = sample_negatives(m, ae, s, a, s_next, kind, mpd, rng)?;
    let pos = m.energy_batch(s, a, s_next)?;
    let neg = m.energy_batch(repeat_rows(s, n).view(), repeat_rows(a, n).view(), negs.view())?;
    let first = (0..s.nrows())
        .filter(|&i| neg.slice(s![i * n..(i + 1) * n]).iter().all(|&e| e > pos[i]))
        .count();
    Ok(first as f64 / s.nrows().max(1) as f64)
}

/// Contrastive training with the configured negatives. `ae = None` runs
/// the manifold-free variant with noise added directly to the next state.
pub fn train_etm(data: &Dataset, ae: Option<&AutoEncoder>, cfg: &EtmConfig) -> Result<(EnergyModel, EtmLog)> {
    if data.is_empty() {
        return Err(EtmError::EmptyDataset);
    }
    let mut rng = rng::substream(cfg.seed, "etm", 0);
    let (s_all, a_all, sp_all) = (data.states(), data.actions(), data.next_states());
    let norm_s = Standardizer::fit(s_all.view());
    let norm_a = Standardizer::fit(a_all.view());
    let norm_sp = Standardizer::fit(sp_all.view());
    let model = EnergyModel::new(&cfg.hidden, norm_s, norm_a, norm_sp, &mut rng)?;
    train_etm_from(model, &s_all, &a_all, &sp_all, ae, cfg, &mut rng)
}

pub(crate) fn train_etm_from(
    mut model: EnergyModel,
    s_all: &Array2<f64>,
    a_all: &Array2<f64>,
    sp_all: &Array2<f64>,
    ae: Option<&AutoEncoder>,
    cfg: &EtmConfig,
    rng: &mut Stream,
) -> Result<(EnergyModel, EtmLog)> {
    cfg.mpd.validate()?;
    if let Some(ae) = ae {
        if ae.ds() != model.ds() {
            return Err(EtmError::DimensionMismatch {
                expected: model.ds(),
                got: ae.ds(),
            });
        }
    }
    let ctx_all = model.context(s_all.view(), a_all.view())?;
    let u_all = model.to_u(sp_all.view());
    let mut opt = AdamState::for_mlp(model.net(), AdamConfig::with_lr(cfg.lr));
    let mut log = EtmLog::default();
    let n = cfg.mpd.n_negatives;
    let k = n + 1;
    let ds = model.ds();
    let mut idx: Vec<usize> = (0..s_all.nrows()).collect();
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        let diverged = |model: EnergyModel| EtmError::Diverged {
            epoch,
            last_good: Box::new(model),
        };
        idx.shuffle(rng);
        let (mut sum_nce, mut sum_pen) = (0.0, 0.0);
        for chunk in idx.chunks(cfg.batch.max(1)) {
            let b = chunk.len();
            let ctx = ctx_all.select(Axis(0), chunk);
            let u_pos = u_all.select(Axis(0), chunk);
            let sp = sp_all.select(Axis(0), chunk);
            let u_neg = match negatives_u(&model, ae, ctx.view(), sp.view(), n, cfg.negatives, &cfg.mpd, rng) {
                Ok(u) => u,
                Err(EtmError::NonFinite { .. }) => return Err(diverged(last_good)),
                Err(e) => return Err(e),
            };
            // candidate block per row: positive first, then its negatives
            let mut cand = Array2::zeros((b * k, ds));
            for i in 0..b {
                cand.row_mut(i * k).assign(&u_pos.row(i));
                cand.slice_mut(s![i * k + 1..(i + 1) * k, ..])
                    .assign(&u_neg.slice(s![i * n..(i + 1) * n, ..]));
            }
            let x = concatenate![Axis(1), repeat_rows(ctx.view(), k), cand];
            let (e, tape) = model.net().forward(x.view())?;
            let mut seed = Array2::zeros((b * k, 1));
            let mut batch_nce = 0.0;
            for i in 0..b {
                let block: Vec<f64> = e.slice(s![i * k..(i + 1) * k, 0]).to_vec();
                let (l, g) = infonce(&block);
                batch_nce += l;
                for (j, gj) in g.into_iter().enumerate() {
                    seed[[i * k + j, 0]] = gj / b as f64;
                }
            }
            let mut grads = tape.backward(seed.view())?;
            let sig = tape.scalar_input_gradient()?;
            let off = x.ncols() - ds;
            let (pen, v_sp) = penalty_terms(sig.input.slice(s![.., off..]), cfg.mpd.grad_margin);
            if pen > 0.0 && cfg.mpd.grad_weight > 0.0 {
                let mut v = Array2::zeros(sig.input.raw_dim());
                v.slice_mut(s![.., off..]).assign(&v_sp);
                let gp = tape.input_gradient_vjp(&sig, v.view())?;
                grads.add_scaled_params(&gp, cfg.mpd.grad_weight / b as f64);
            }
            drop(tape);
            if !batch_nce.is_finite() || !pen.is_finite() || !grads.is_finite() {
                return Err(diverged(last_good));
            }
            opt.step_mlp(model.net_mut(), &grads)?;
            sum_nce += batch_nce;
            sum_pen += pen;
        }
        let rows = idx.len() as f64;
        log.loss_nce.push(sum_nce / rows);
        log.loss_grad.push(sum_pen / rows);
    }
    Ok((model, log))
}
