//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::{CliError, Result};
use crate::etm::{EtmConfig, InferenceInit, LangevinConfig, MpdConfig, NegativeKind, RegressorConfig};
use crate::manifold::AeConfig;
use crate::pessimism::{ClipMode, PessimismConfig};
use crate::policy::{PolicyConfig, RewardConfig, RolloutConfig, SacConfig};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("io.data", "", "input dataset; empty = data.csv in the run directory"),
    ("io.ae", "", "autoencoder checkpoint; empty = checkpoints/ae.ckpt, trained if missing"),
    ("io.model", "", "energy checkpoint; empty = checkpoints/etm.ckpt"),
    ("io.id", "", "ID evaluation set; empty = heldout_id.csv"),
    ("io.ood", "", "OOD evaluation set; empty = heldout_ood.csv"),
    ("io.models", "", "name=path list of energy checkpoints for eval-dynamics"),
    ("io.datasets", "", "name=path list of datasets for eval-dynamics"),
    ("seed", "0", "master seed"),
    ("data.env", "didactic", "didactic | didactic-embedded | cliff"),
    ("data.n", "10000", "transitions to generate"),
    ("data.sigma", "0.05", "didactic next-state noise"),
    ("data.embed_state", "16", "embedded state dimension"),
    ("data.embed_action", "16", "embedded action dimension"),
    ("ae.d_m", "2", "latent dimension"),
    ("ae.hidden", "64,64,64", "autoencoder hidden widths"),
    ("ae.epochs", "100", "autoencoder epochs"),
    ("ae.batch", "256", "autoencoder batch size"),
    ("ae.lr", "1e-3", "autoencoder learning rate"),
    ("etm.members", "5", "ensemble size M"),
    ("etm.hidden", "200,200,200,200", "energy network hidden widths"),
    ("etm.epochs", "100", "energy training epochs"),
    ("etm.batch", "1024", "energy training batch size"),
    ("etm.lr", "1e-3", "energy learning rate"),
    ("etm.negatives", "mpd", "mpd | gaussian | noise"),
    ("etm.gaussian_sigma", "0.5", "scale of gaussian negatives around the positive"),
    ("etm.manifold", "learned", "learned (autoencoder) | identity"),
    ("mpd.sigma", "0.5", "latent diffusion scale"),
    ("mpd.n_negatives", "20", "negatives per positive"),
    ("mpd.steps_latent", "10", "negative chain steps in latent space"),
    ("mpd.steps_ambient", "10", "negative chain steps in state space"),
    ("mpd.step", "1e-3", "negative chain step size"),
    ("mpd.noise", "0.5", "negative chain noise scale"),
    ("mpd.grad_margin", "5", "gradient penalty margin"),
    ("mpd.grad_weight", "1", "gradient penalty weight"),
    ("reg.hidden", "200,200,200,200", "initializing regressor hidden widths"),
    ("reg.epochs", "100", "regressor epochs"),
    ("reg.batch", "256", "regressor batch size"),
    ("reg.lr", "1e-3", "regressor learning rate"),
    ("langevin.steps_latent", "30", "inference steps in latent space"),
    ("langevin.steps_ambient", "20", "inference steps in state space"),
    ("langevin.step", "1e-3", "inference step size"),
    ("langevin.noise", "0.5", "inference noise scale"),
    ("langevin.delta_clip", "0.5", "per-step update cap"),
    ("infer.init", "regressor", "regressor | latent-noise"),
    ("infer.restarts", "1", "inference restarts, lowest energy kept"),
    ("pess.delta", "auto", "energy threshold; auto = quantile of training energies"),
    ("pess.delta_quantile", "0.95", "quantile used by delta = auto"),
    ("pess.delta_rows", "1000", "training rows used by delta = auto"),
    ("pess.lambda", "0.5", "dispersion penalty coefficient"),
    ("pess.n", "10", "inference samples per member"),
    ("pess.gamma", "0.99", "discount"),
    ("pess.clip", "bootstrap-mean", "off | bootstrap-mean | target"),
    ("rollout.horizon", "5", "model rollout horizon"),
    ("rollout.store_truncated", "true", "keep truncated steps as stopped rows"),
    ("rollout.steps_latent", "30", "rollout inference steps in latent space"),
    ("rollout.steps_ambient", "30", "rollout inference steps in state space"),
    ("rollout.step", "1e-3", "rollout inference step size"),
    ("rollout.noise", "0.1", "rollout inference noise scale"),
    ("sac.hidden", "256,256", "actor and critic hidden widths"),
    ("sac.actor_lr", "1e-4", "actor learning rate"),
    ("sac.critic_lr", "3e-4", "critic learning rate"),
    ("sac.alpha_lr", "3e-4", "entropy coefficient learning rate"),
    ("sac.tau", "5e-3", "target smoothing coefficient"),
    ("sac.init_alpha", "1", "initial entropy coefficient"),
    ("sac.auto_alpha", "true", "tune the entropy coefficient"),
    ("reward.source", "analytic", "analytic | model"),
    ("reward.hidden", "256,256", "reward network hidden widths"),
    ("reward.epochs", "50", "reward network epochs"),
    ("reward.lr", "1e-4", "reward network learning rate"),
    ("policy.steps", "50000", "gradient steps"),
    ("policy.batch", "256", "actor-critic batch size"),
    ("policy.real_ratio", "0.05", "share of real rows per batch"),
    ("policy.capacity", "100000", "synthetic buffer capacity"),
    ("policy.rollout_every", "250", "gradient steps between rollouts"),
    ("policy.rollout_starts", "256", "start states per rollout"),
    ("policy.eval_every", "5000", "gradient steps between evaluations"),
    ("policy.eval_episodes", "10", "evaluation episodes"),
    ("bound.instances", "200", "random tabular instances"),
    ("bound.gamma", "0.9", "tabular discount"),
    ("corr.rows", "500", "rows in each of the ID and OOD sets"),
    ("corr.shift_lo", "0.25", "smallest off-manifold shift, in units of four training standard deviations"),
    ("corr.shift_hi", "3", "largest off-manifold shift, same units"),
    ("corr.bins", "30", "energy histogram bins"),
    ("ablate.seeds", "5", "seeds per arm, counted up from `seed`"),
    ("ablate.n_data", "5000", "offline CliffChain transitions per seed"),
    ("ablate.members", "3", "ensemble size per seed"),
    ("ablate.etm_epochs", "20", "energy training epochs per seed"),
    ("ablate.steps", "10000", "policy gradient steps per arm"),
    ("ablate.probe_rows", "1000", "start states for the out-of-support action probe"),
    ("ablate.ood_action", "0.10", "actions above this are out of support"),
    ("ablate.sweep", "false", "also sweep lambda over 0.5..2.5"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Usage(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("usage: "))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Sorted `key = value` snapshot; applying it to the defaults
    /// reproduces this configuration.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| CliError::Usage(format!("config `{key}`: cannot parse `{v}`")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)?
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("config `{key}`: bad list entry `{p}`")))
            })
            .collect()
    }

    fn choice<'a>(&'a self, key: &str, allowed: &[&str]) -> Result<&'a str> {
        let v = self.raw(key)?;
        if allowed.contains(&v) {
            Ok(v)
        } else {
            Err(CliError::Usage(format!("config `{key}` must be one of {allowed:?}, got `{v}`")))
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn env(&self) -> Result<&str> {
        self.choice("data.env", &["didactic", "didactic-embedded", "cliff"])
    }

    pub fn ae(&self) -> Result<AeConfig> {
        Ok(AeConfig {
            d_m: self.get("ae.d_m")?,
            hidden: self.list("ae.hidden")?,
            epochs: self.get("ae.epochs")?,
            lr: self.get("ae.lr")?,
            batch: self.get("ae.batch")?,
            seed: self.seed()?,
        })
    }

    pub fn learned_manifold(&self) -> Result<bool> {
        Ok(self.choice("etm.manifold", &["learned", "identity"])? == "learned")
    }

    pub fn negatives(&self) -> Result<NegativeKind> {
        Ok(match self.choice("etm.negatives", &["mpd", "gaussian", "noise"])? {
            "mpd" => NegativeKind::Mpd,
            "gaussian" => NegativeKind::Gaussian {
                sigma: self.get("etm.gaussian_sigma")?,
            },
            _ => NegativeKind::Noise,
        })
    }

    pub fn etm(&self) -> Result<EtmConfig> {
        let step: f64 = self.get("mpd.step")?;
        Ok(EtmConfig {
            hidden: self.list("etm.hidden")?,
            epochs: self.get("etm.epochs")?,
            batch: self.get("etm.batch")?,
            lr: self.get("etm.lr")?,
            mpd: MpdConfig {
                sigma: self.get("mpd.sigma")?,
                n_negatives: self.get("mpd.n_negatives")?,
                chain: LangevinConfig {
                    steps_latent: self.get("mpd.steps_latent")?,
                    steps_ambient: self.get("mpd.steps_ambient")?,
                    step_latent: step,
                    step_ambient: step,
                    noise_scale: self.get("mpd.noise")?,
                    delta_clip: self.get("langevin.delta_clip")?,
                },
                grad_margin: self.get("mpd.grad_margin")?,
                grad_weight: self.get("mpd.grad_weight")?,
            },
            negatives: self.negatives()?,
            seed: self.seed()?,
        })
    }

    pub fn regressor(&self) -> Result<RegressorConfig> {
        Ok(RegressorConfig {
            hidden: self.list("reg.hidden")?,
            epochs: self.get("reg.epochs")?,
            batch: self.get("reg.batch")?,
            lr: self.get("reg.lr")?,
            seed: self.seed()?,
        })
    }

    fn chain(&self, prefix: &str) -> Result<LangevinConfig> {
        let step: f64 = self.get(&format!("{prefix}.step"))?;
        Ok(LangevinConfig {
            steps_latent: self.get(&format!("{prefix}.steps_latent"))?,
            steps_ambient: self.get(&format!("{prefix}.steps_ambient"))?,
            step_latent: step,
            step_ambient: step,
            noise_scale: self.get(&format!("{prefix}.noise"))?,
            delta_clip: self.get("langevin.delta_clip")?,
        })
    }

    /// Chain used for standalone inference.
    pub fn langevin(&self) -> Result<LangevinConfig> {
        self.chain("langevin")
    }

    /// Chain used inside policy rollouts.
    pub fn rollout_langevin(&self) -> Result<LangevinConfig> {
        self.chain("rollout")
    }

    pub fn init(&self) -> Result<InferenceInit> {
        Ok(match self.choice("infer.init", &["regressor", "latent-noise"])? {
            "regressor" => InferenceInit::Regressor,
            _ => InferenceInit::LatentNoise,
        })
    }

    /// `None` when the threshold is to be derived from training energies.
    pub fn delta(&self) -> Result<Option<f64>> {
        match self.raw("pess.delta")? {
            "auto" => Ok(None),
            "inf" | "+inf" => Ok(Some(f64::INFINITY)),
            "-inf" => Ok(Some(f64::NEG_INFINITY)),
            _ => self.get("pess.delta").map(Some),
        }
    }

    pub fn pess(&self, delta: f64) -> Result<PessimismConfig> {
        let clip = match self.choice("pess.clip", &["off", "bootstrap-mean", "target"])? {
            "off" => ClipMode::Off,
            "target" => ClipMode::Target,
            _ => ClipMode::BootstrapMean,
        };
        let cfg = PessimismConfig {
            delta,
            lambda: self.get("pess.lambda")?,
            m: self.get("etm.members")?,
            n: self.get("pess.n")?,
            gamma: self.get("pess.gamma")?,
            clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sac(&self) -> Result<SacConfig> {
        Ok(SacConfig {
            hidden: self.list("sac.hidden")?,
            actor_lr: self.get("sac.actor_lr")?,
            critic_lr: self.get("sac.critic_lr")?,
            alpha_lr: self.get("sac.alpha_lr")?,
            tau: self.get("sac.tau")?,
            init_alpha: self.get("sac.init_alpha")?,
            auto_alpha: self.get("sac.auto_alpha")?,
        })
    }

    pub fn reward(&self) -> Result<RewardConfig> {
        Ok(RewardConfig {
            hidden: self.list("reward.hidden")?,
            epochs: self.get("reward.epochs")?,
            batch: self.get("policy.batch")?,
            lr: self.get("reward.lr")?,
            seed: self.seed()?,
        })
    }

    pub fn model_reward(&self) -> Result<bool> {
        Ok(self.choice("reward.source", &["analytic", "model"])? == "model")
    }

    pub fn policy(&self, delta: f64) -> Result<PolicyConfig> {
        Ok(PolicyConfig {
            sac: self.sac()?,
            pess: self.pess(delta)?,
            rollout: RolloutConfig {
                horizon: self.get("rollout.horizon")?,
                store_truncated: self.get("rollout.store_truncated")?,
                init: self.init()?,
            },
            steps: self.get("policy.steps")?,
            batch: self.get("policy.batch")?,
            real_ratio: self.get("policy.real_ratio")?,
            capacity: self.get("policy.capacity")?,
            rollout_every: self.get("policy.rollout_every")?,
            rollout_starts: self.get("policy.rollout_starts")?,
            eval_every: self.get("policy.eval_every")?,
            eval_episodes: self.get("policy.eval_episodes")?,
            seed: self.seed()?,
        })
    }
}
