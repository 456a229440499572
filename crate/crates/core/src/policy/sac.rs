use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::replay::Sample;
use super::{PolicyError, Result};
use crate::checkpoint::Checkpoint;
use crate::ndgrad::{Activation, AdamConfig, AdamState, Gradients, Mlp};
use crate::norm::Standardizer;
use crate::pessimism::{penalized_target, PessimismConfig};
use crate::rng::{self, Stream};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub tau: f64,
    pub init_alpha: f64,
    pub auto_alpha: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            tau: 5e-3,
            init_alpha: 1.0,
            auto_alpha: true,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Tanh-squashed Gaussian policy scaled to `[-bound, bound]`.
#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    pub norm_s: Standardizer,
    pub bound: f64,
}

/// Reparameterized sample with the quantities the actor gradient needs.
struct Draw {
    a: Array2<f64>,
    logp: Array1<f64>,
    tanh_u: Array2<f64>,
    sigma_eps: Array2<f64>,
    ls_active: Array2<bool>,
}

impl Actor {
    pub fn new(ds: usize, da: usize, bound: f64, hidden: &[usize], norm_s: Standardizer, rng: &mut Stream) -> Result<Self> {
        let mut dims = vec![ds];
        dims.extend(hidden);
        dims.push(2 * da);
        Ok(Self {
            net: Mlp::new(&dims, Activation::Relu, rng)?,
            norm_s,
            bound,
        })
    }

    pub fn ds(&self) -> usize {
        self.net.input_dim()
    }

    pub fn da(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Deterministic action `bound * tanh(mean)`.
    pub fn act(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.net.predict(self.norm_s.apply(s).view())?;
        let da = self.da();
        Ok(out.slice(s![.., ..da]).mapv(|m| self.bound * m.tanh()))
    }

    pub fn sample(&self, s: ArrayView2<f64>, rng: &mut Stream) -> Result<(Array2<f64>, Array1<f64>)> {
        let eps = Array2::from_shape_fn((s.nrows(), self.da()), |_| rng::normal(rng));
        let out = self.net.predict(self.norm_s.apply(s).view())?;
        let d = self.draw(&out, eps.view());
        Ok((d.a, d.logp))
    }

    fn draw(&self, out: &Array2<f64>, eps: ArrayView2<f64>) -> Draw {
        let da = self.da();
        let mu = out.slice(s![.., ..da]);
        let raw = out.slice(s![.., da..]);
        let ls = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let ls_active = raw.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        let sigma_eps = &ls.mapv(f64::exp) * &eps;
        let u = &mu + &sigma_eps;
        let tanh_u = u.mapv(f64::tanh);
        let mut logp = Array1::zeros(out.nrows());
        let ln_bound = self.bound.ln();
        for b in 0..out.nrows() {
            let mut acc = 0.0;
            for k in 0..da {
                acc += -0.5 * eps[[b, k]] * eps[[b, k]] - ls[[b, k]] - HALF_LN_2PI - ln_bound
                    - log_one_minus_tanh_sq(u[[b, k]]);
            }
            logp[b] = acc;
        }
        Draw {
            a: tanh_u.mapv(|t| self.bound * t),
            logp,
            tanh_u,
            sigma_eps,
            ls_active,
        }
    }
}

/// Squashed-Gaussian actor, twin critics with slow targets, and a learned
/// entropy coefficient.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub actor: Actor,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub cfg: SacConfig,
    opt_actor: AdamState,
    opt_critics: [AdamState; 2],
    opt_alpha: AdamState,
}

impl ActorCritic {
    pub fn new(ds: usize, da: usize, bound: f64, norm_s: Standardizer, cfg: SacConfig, rng: &mut Stream) -> Result<Self> {
        if !(bound > 0.0) || !(cfg.tau > 0.0 && cfg.tau <= 1.0) || !(cfg.init_alpha >= 0.0) {
            return Err(PolicyError::Config(format!(
                "bound {bound}, tau {}, alpha {} out of range",
                cfg.tau, cfg.init_alpha
            )));
        }
        let actor = Actor::new(ds, da, bound, &cfg.hidden, norm_s, rng)?;
        let mut dims = vec![ds + da];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let critics = [
            Mlp::new(&dims, Activation::Relu, rng)?,
            Mlp::new(&dims, Activation::Relu, rng)?,
        ];
        let targets = critics.clone();
        let opt_actor = AdamState::for_mlp(&actor.net, AdamConfig::with_lr(cfg.actor_lr));
        let opt_critics = [
            AdamState::for_mlp(&critics[0], AdamConfig::with_lr(cfg.critic_lr)),
            AdamState::for_mlp(&critics[1], AdamConfig::with_lr(cfg.critic_lr)),
        ];
        Ok(Self {
            actor,
            critics,
            targets,
            log_alpha: cfg.init_alpha.ln(),
            // -da for actions rescaled to [-1, 1]
            target_entropy: da as f64 * (bound.ln() - 1.0),
            opt_actor,
            opt_critics,
            opt_alpha: AdamState::new(&[1], AdamConfig::with_lr(cfg.alpha_lr)),
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn critic_input(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        concatenate![Axis(1), self.actor.norm_s.apply(s), a.mapv(|v| v / self.actor.bound)]
    }

    /// Twin critic values `Q_k(s, a)`.
    pub fn q_values(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<[Array1<f64>; 2]> {
        let x = self.critic_input(s, a);
        Ok([
            self.critics[0].predict(x.view())?.column(0).to_owned(),
            self.critics[1].predict(x.view())?.column(0).to_owned(),
        ])
    }

    /// Penalized targets: per member, the mean over its successors of the
    /// soft value `min_k Qtarg_k(s', a') - alpha log pi(a'|s')` (zero where
    /// stopped), then `r - lambda std + gamma mean` across members.
    pub fn critic_targets(&self, batch: &[&Sample], pess: &PessimismConfig, rng: &mut Stream) -> Result<Array1<f64>> {
        if batch.is_empty() {
            return Err(PolicyError::Empty);
        }
        let ds = self.actor.ds();
        let total: usize = batch.iter().map(|r| r.next.len()).sum();
        let mut next = Array2::zeros((total, ds));
        let mut k = 0;
        for row in batch {
            for sp in &row.next {
                next.row_mut(k).assign(&ndarray::ArrayView1::from(sp.as_slice()));
                k += 1;
            }
        }
        let (a_next, logp) = self.actor.sample(next.view(), rng)?;
        let x = self.critic_input(next.view(), a_next.view());
        let q0 = self.targets[0].predict(x.view())?;
        let q1 = self.targets[1].predict(x.view())?;
        let alpha = self.alpha();
        let v: Vec<f64> = (0..total).map(|i| q0[[i, 0]].min(q1[[i, 0]]) - alpha * logp[i]).collect();
        let mut out = Array1::zeros(batch.len());
        let mut k = 0;
        let mut q_bars = Vec::new();
        for (b, row) in batch.iter().enumerate() {
            let n = row.per_member();
            q_bars.clear();
            for i in 0..row.members {
                let mut sum = 0.0;
                for j in 0..n {
                    let idx = i * n + j;
                    if !row.stop[idx] {
                        sum += v[k + idx];
                    }
                }
                q_bars.push(sum / n as f64);
            }
            k += row.next.len();
            out[b] = penalized_target(row.r, &q_bars, pess);
        }
        Ok(out)
    }

    /// One Adam step on both critics toward the penalized targets; returns the
    /// summed mean squared errors.
    pub fn critic_update(&mut self, batch: &[&Sample], pess: &PessimismConfig, rng: &mut Stream) -> Result<f64> {
        let y = self.critic_targets(batch, pess, rng)?;
        let b = batch.len();
        let s = Array2::from_shape_fn((b, self.actor.ds()), |(i, j)| batch[i].s[j]);
        let a = Array2::from_shape_fn((b, self.actor.da()), |(i, j)| batch[i].a[j]);
        let x = self.critic_input(s.view(), a.view());
        let mut loss = 0.0;
        for k in 0..2 {
            let (q, tape) = self.critics[k].forward(x.view())?;
            let diff = &q.column(0) - &y;
            loss += diff.dot(&diff) / b as f64;
            let seed = diff.mapv(|d| 2.0 * d / b as f64).insert_axis(Axis(1));
            let grads = tape.backward(seed.view())?;
            drop(tape);
            self.opt_critics[k].step_mlp(&mut self.critics[k], &grads)?;
        }
        Ok(loss)
    }

    /// `mean(alpha log pi(a|s) - min_k Q_k(s, a))` with `a` reparameterized by
    /// `eps`; returns the loss, actor gradients and log-probabilities.
    pub fn actor_loss_grad(&self, s: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<(f64, Gradients, Array1<f64>)> {
        let b = s.nrows();
        if b == 0 {
            return Err(PolicyError::Empty);
        }
        let (out, tape) = self.actor.net.forward(self.actor.norm_s.apply(s).view())?;
        let d = self.actor.draw(&out, eps);
        let x = self.critic_input(s, d.a.view());
        let (q0, t0) = self.critics[0].forward(x.view())?;
        let (q1, t1) = self.critics[1].forward(x.view())?;
        let pick0 = Array2::from_shape_fn((b, 1), |(i, _)| if q0[[i, 0]] <= q1[[i, 0]] { 1.0 } else { 0.0 });
        let pick1 = pick0.mapv(|p| 1.0 - p);
        let gx = t0.backward_input(pick0.view())? + t1.backward_input(pick1.view())?;
        let ds = self.actor.ds();
        let da = self.actor.da();
        let alpha = self.alpha();
        let mut loss = 0.0;
        for i in 0..b {
            loss += alpha * d.logp[i] - q0[[i, 0]].min(q1[[i, 0]]);
        }
        loss /= b as f64;
        let mut seed = Array2::zeros((b, 2 * da));
        for i in 0..b {
            for k in 0..da {
                let t = d.tanh_u[[i, k]];
                // dQ/du through a = bound * tanh(u); critic sees a / bound
                let dq_du = gx[[i, ds + k]] * (1.0 - t * t);
                let se = d.sigma_eps[[i, k]];
                seed[[i, k]] = (alpha * 2.0 * t - dq_du) / b as f64;
                if d.ls_active[[i, k]] {
                    seed[[i, da + k]] = (alpha * (-1.0 + 2.0 * t * se) - dq_du * se) / b as f64;
                }
            }
        }
        let grads = tape.backward(seed.view())?;
        Ok((loss, grads, d.logp))
    }

    /// One actor step, then (if enabled) one entropy-coefficient step.
    pub fn actor_update(&mut self, s: ArrayView2<f64>, rng: &mut Stream) -> Result<f64> {
        let eps = Array2::from_shape_fn((s.nrows(), self.actor.da()), |_| rng::normal(rng));
        let (loss, grads, logp) = self.actor_loss_grad(s, eps.view())?;
        self.opt_actor.step_mlp(&mut self.actor.net, &grads)?;
        if self.cfg.auto_alpha {
            let g = -(logp.mean().unwrap_or(0.0) + self.target_entropy);
            let mut p = [self.log_alpha];
            self.opt_alpha.step(&mut [&mut p[..]], &[&[g][..]])?;
            self.log_alpha = p[0];
        }
        Ok(loss)
    }

    pub fn soft_update_targets(&mut self) {
        for k in 0..2 {
            self.targets[k].soft_update_from(&self.critics[k], self.cfg.tau);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.actor.net.is_finite() && self.critics.iter().all(Mlp::is_finite) && self.log_alpha.is_finite()
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.insert_mlp("policy.actor", &self.actor.net);
        for k in 0..2 {
            ck.insert_mlp(&format!("policy.q{k}"), &self.critics[k]);
            ck.insert_mlp(&format!("policy.q{k}_target"), &self.targets[k]);
        }
        let flat = self.actor.norm_s.to_flat();
        ck.insert_array("policy.normalizer", &[flat.len()], &flat);
        ck.insert_array("policy.log_alpha", &[1], &[self.log_alpha]);
        ck.set_meta("policy.bound", format!("{:e}", self.actor.bound));
    }

    /// Restores networks and the entropy coefficient; optimizer moments start fresh.
    pub fn load(ck: &Checkpoint, cfg: SacConfig) -> Result<Self> {
        let bad = |what: &str| PolicyError::Config(format!("policy checkpoint: {what}"));
        let net = ck.mlp("policy.actor")?;
        let (_, flat) = ck.array("policy.normalizer")?;
        let norm_s = Standardizer::from_flat(&flat).ok_or_else(|| bad("normalizer"))?;
        let bound: f64 = ck
            .meta("policy.bound")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bound"))?;
        let (ds, da) = (net.input_dim(), net.output_dim() / 2);
        let mut ac = Self::new(ds, da, bound, norm_s.clone(), cfg, &mut rng::stream(0))?;
        ac.actor = Actor { net, norm_s, bound };
        for k in 0..2 {
            ac.critics[k] = ck.mlp(&format!("policy.q{k}"))?;
            ac.targets[k] = ck.mlp(&format!("policy.q{k}_target"))?;
        }
        ac.log_alpha = ck.array("policy.log_alpha")?.1[0];
        Ok(ac)
    }
}
