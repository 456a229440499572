use ndarray::{Array2, Axis};
use rand::Rng;

use super::replay::ReplayBuffer;
use super::rollout::{rollout, RewardSource, RolloutConfig, RolloutStats};
use super::sac::{Actor, ActorCritic, SacConfig};
use super::{PolicyError, Result};
use crate::envdata::{Dataset, Env};
use crate::etm::EnergyEnsemble;
use crate::norm::Standardizer;
use crate::pessimism::{mean_std, PessimismConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub sac: SacConfig,
    pub pess: PessimismConfig,
    pub rollout: RolloutConfig,
    pub steps: usize,
    pub batch: usize,
    pub real_ratio: f64,
    pub capacity: usize,
    pub rollout_every: usize,
    pub rollout_starts: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            pess: PessimismConfig::default(),
            rollout: RolloutConfig::default(),
            steps: 50_000,
            batch: 256,
            real_ratio: 0.05,
            capacity: 100_000,
            rollout_every: 250,
            rollout_starts: 256,
            eval_every: 5_000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLogRow {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    /// Cumulative non-truncated model steps.
    pub synthetic_steps: usize,
    /// Cumulative fraction of attempted model steps that were truncated.
    pub truncation_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyLog {
    pub rows: Vec<PolicyLogRow>,
    pub rollouts: RolloutStats,
}

impl PolicyLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_return,std_return,synthetic_steps,truncation_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{},{:e}\n",
                r.step, r.mean_return, r.std_return, r.synthetic_steps, r.truncation_rate
            ));
        }
        out
    }

    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_return)
    }
}

/// Deterministic-action returns over `episodes` seeded episodes; population std.
pub fn evaluate_policy(env: &dyn Env, actor: &Actor, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(PolicyError::Config("episodes must be >= 1".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut r = rng::substream(seed, "eval", k as u64);
        let mut s = env.reset(&mut r);
        let mut total = 0.0;
        for _ in 0..env.max_steps() {
            let x = Array2::from_shape_vec((1, s.len()), s.clone()).map_err(|e| PolicyError::Config(e.to_string()))?;
            let a = actor.act(x.view())?.row(0).to_vec();
            let (sn, rew, done) = env.step(&s, &a);
            total += rew;
            if done {
                break;
            }
            s = sn;
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Alternates energy-gated model rollouts with actor-critic updates on a
/// mix of real and synthetic rows, evaluating on `env` every `eval_every`
/// steps and after the last step.
pub fn train_policy(
    data: &Dataset,
    ens: &EnergyEnsemble,
    env: &dyn Env,
    reward: RewardSource,
    cfg: &PolicyConfig,
) -> Result<(ActorCritic, PolicyLog)> {
    if data.is_empty() {
        return Err(PolicyError::Empty);
    }
    if cfg.batch == 0 || cfg.rollout_every == 0 || cfg.eval_every == 0 {
        return Err(PolicyError::Config("batch, rollout_every and eval_every must be >= 1".into()));
    }
    if ens.ds() != data.ds || ens.da() != data.da || env.state_dim() != data.ds {
        return Err(PolicyError::Config("ensemble, dataset and environment dimensions differ".into()));
    }
    cfg.pess.validate()?;
    let states = data.states();
    let mut ac = ActorCritic::new(
        data.ds,
        data.da,
        env.action_bound(),
        Standardizer::fit(states.view()),
        cfg.sac.clone(),
        &mut rng::substream(cfg.seed, "policy-init", 0),
    )?;
    let mut buffer = ReplayBuffer::from_dataset(data, cfg.capacity, cfg.real_ratio)?;
    let mut r_roll = rng::substream(cfg.seed, "policy-rollout", 0);
    let mut r_upd = rng::substream(cfg.seed, "policy-update", 0);
    let eval_seed = rng::fork_seed(&mut rng::substream(cfg.seed, "policy-eval", 0));
    let mut log = PolicyLog::default();
    for step in 0..cfg.steps {
        if step % cfg.rollout_every == 0 && cfg.rollout.horizon > 0 && cfg.rollout_starts > 0 {
            let idx: Vec<usize> = (0..cfg.rollout_starts).map(|_| r_roll.random_range(0..data.len())).collect();
            let starts = states.select(Axis(0), &idx);
            let (rows, stats) = rollout(ens, &ac.actor, starts.view(), &cfg.rollout, &cfg.pess, reward, &mut r_roll)?;
            for row in rows {
                buffer.push(row);
            }
            log.rollouts.extend(stats);
        }
        let (batch, _) = buffer.sample(cfg.batch, &mut r_upd);
        let critic_loss = ac.critic_update(&batch, &cfg.pess, &mut r_upd)?;
        if !critic_loss.is_finite() {
            return Err(PolicyError::NonFinite { what: "critic loss", step });
        }
        let s = Array2::from_shape_fn((batch.len(), data.ds), |(i, j)| batch[i].s[j]);
        let actor_loss = ac.actor_update(s.view(), &mut r_upd)?;
        if !actor_loss.is_finite() || !ac.is_finite() {
            return Err(PolicyError::NonFinite { what: "actor update", step });
        }
        ac.soft_update_targets();
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let (mean_return, std_return) = evaluate_policy(env, &ac.actor, cfg.eval_episodes, eval_seed)?;
            log.rows.push(PolicyLogRow {
                step: done,
                mean_return,
                std_return,
                synthetic_steps: log.rollouts.synthetic_steps(),
                truncation_rate: log.rollouts.truncation_rate(),
            });
        }
    }
    Ok((ac, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::{gen_cliff_offline, CliffChain};
    use crate::etm::{EnergyModel, LangevinConfig};

    struct Zero;

    impl Env for Zero {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn action_bound(&self) -> f64 {
            1.0
        }
        fn max_steps(&self) -> usize {
            20
        }
        fn reset(&self, rng: &mut rng::Stream) -> Vec<f64> {
            vec![rng::normal(rng)]
        }
        fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
            (vec![s[0] + a[0]], 0.0, false)
        }
        fn reward(&self, _s: &[f64], _a: &[f64], _s_next: &[f64]) -> (f64, bool) {
            (0.0, false)
        }
    }

    fn actor() -> Actor {
        Actor::new(1, 1, 0.2, &[8], Standardizer::identity(1), &mut rng::stream(0)).unwrap()
    }

    #[test]
    fn evaluation_cases() {
        assert_eq!(evaluate_policy(&Zero, &actor(), 10, 3).unwrap(), (0.0, 0.0));
        let env = CliffChain::default();
        let a = evaluate_policy(&env, &actor(), 10, 3).unwrap();
        assert_eq!(a, evaluate_policy(&env, &actor(), 10, 3).unwrap());
        assert!(evaluate_policy(&env, &actor(), 0, 3).is_err());
    }

    #[test]
    fn short_training_run_is_reproducible() {
        let data = gen_cliff_offline(400, 1).unwrap();
        let mut r = rng::stream(2);
        let [ns, na, nsp] = [data.states(), data.actions(), data.next_states()].map(|x| Standardizer::fit(x.view()));
        let members = (0..2)
            .map(|_| EnergyModel::new(&[8], ns.clone(), na.clone(), nsp.clone(), &mut r).unwrap())
            .collect();
        let lang = LangevinConfig {
            steps_latent: 1,
            steps_ambient: 1,
            step_latent: 1e-2,
            step_ambient: 1e-2,
            noise_scale: 0.1,
            delta_clip: 0.5,
        };
        let ens = EnergyEnsemble::new(members, None, lang).unwrap();
        let cfg = PolicyConfig {
            sac: SacConfig {
                hidden: vec![16, 16],
                ..SacConfig::default()
            },
            pess: PessimismConfig {
                m: 2,
                n: 2,
                delta: 0.0,
                ..PessimismConfig::default()
            },
            steps: 30,
            batch: 16,
            rollout_every: 10,
            rollout_starts: 8,
            eval_every: 15,
            eval_episodes: 2,
            seed: 5,
            ..PolicyConfig::default()
        };
        let env = CliffChain::default();
        let (ac, log) = train_policy(&data, &ens, &env, RewardSource::Analytic(&env), &cfg).unwrap();
        assert_eq!(log.rows.len(), 2);
        assert_eq!(log.rows[1].step, 30);
        assert!(log.to_csv().starts_with("step,mean_return,std_return,synthetic_steps,truncation_rate\n15,"));
        let (ac2, log2) = train_policy(&data, &ens, &env, RewardSource::Analytic(&env), &cfg).unwrap();
        assert_eq!(log, log2);
        assert_eq!(ac.actor.net.params(), ac2.actor.net.params());
    }
}
