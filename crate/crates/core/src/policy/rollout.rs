use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::replay::Sample;
use super::reward::RewardModel;
use super::sac::Actor;
use super::{PolicyError, Result};
use crate::envdata::Env;
use crate::etm::{EnergyEnsemble, InferenceInit};
use crate::pessimism::{virtual_terminal, PessimismConfig};
use crate::rng::Stream;

/// Where synthetic rewards come from.
#[derive(Clone, Copy)]
pub enum RewardSource<'a> {
    /// The environment's own reward and termination applied to predicted states.
    Analytic(&'a dyn Env),
    /// Learned reward; model rollouts never terminate on their own.
    Model(&'a RewardModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Store truncated steps as rows whose successors are all stopped.
    pub store_truncated: bool,
    pub init: InferenceInit,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            store_truncated: true,
            init: InferenceInit::LatentNoise,
        }
    }
}

/// One attempted model step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Lowest final energy among the gating member's samples.
    pub min_energy: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutStats {
    pub steps: Vec<StepRecord>,
}

impl RolloutStats {
    pub fn attempted(&self) -> usize {
        self.steps.len()
    }

    pub fn truncated(&self) -> usize {
        self.steps.iter().filter(|r| r.truncated).count()
    }

    /// Steps that continued the branch.
    pub fn synthetic_steps(&self) -> usize {
        self.attempted() - self.truncated()
    }

    pub fn truncation_rate(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.truncated() as f64 / self.attempted() as f64
        }
    }

    /// Fraction of non-truncated steps whose action satisfies `pred`.
    pub fn emitted_fraction(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        let kept: Vec<_> = self.steps.iter().filter(|r| !r.truncated).collect();
        if kept.is_empty() {
            return 0.0;
        }
        kept.iter().filter(|r| pred(&r.a)).count() as f64 / kept.len() as f64
    }

    pub fn extend(&mut self, other: RolloutStats) {
        self.steps.extend(other.steps);
    }
}

fn row_of(x: &Array2<f64>, b: usize) -> Vec<f64> {
    x.row(b).to_vec()
}

/// Branched model rollouts of up to `horizon` steps from every start state.
///
/// Each step draws `pess.n` successors from each of the `pess.m` members. A
/// randomly chosen member gates the branch: it is truncated when that
/// member's lowest sample energy exceeds `pess.delta`; otherwise it continues
/// from that member's first sample. Successors above `delta` or terminal are
/// stopped in the stored row.
pub fn rollout(
    ens: &EnergyEnsemble,
    actor: &Actor,
    starts: ArrayView2<f64>,
    cfg: &RolloutConfig,
    pess: &PessimismConfig,
    reward: RewardSource,
    rng: &mut Stream,
) -> Result<(Vec<Sample>, RolloutStats)> {
    pess.validate()?;
    if pess.m != ens.len() {
        return Err(PolicyError::Config(format!(
            "pessimism expects {} members, ensemble has {}",
            pess.m,
            ens.len()
        )));
    }
    let (m, n) = (pess.m, pess.n);
    let mut rows = Vec::new();
    let mut stats = RolloutStats::default();
    let mut states = starts.to_owned();
    for _ in 0..cfg.horizon {
        let b = states.nrows();
        if b == 0 {
            break;
        }
        let (actions, _) = actor.sample(states.view(), rng)?;
        let mut preds: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(m * n);
        for i in 0..m {
            for _ in 0..n {
                preds.push(ens.predict_next(i, states.view(), actions.view(), cfg.init, rng)?);
            }
        }
        let rewards: Vec<Array1<f64>> = match reward {
            RewardSource::Model(rm) => preds
                .iter()
                .map(|(sp, _)| rm.predict(states.view(), actions.view(), sp.view()))
                .collect::<Result<_>>()?,
            RewardSource::Analytic(_) => Vec::new(),
        };
        let mut next_states = Vec::new();
        for row in 0..b {
            let s = row_of(&states, row);
            let a = row_of(&actions, row);
            let gate = rng.random_range(0..m);
            let min_energy = (0..n).map(|j| preds[gate * n + j].1[row]).fold(f64::INFINITY, f64::min);
            let truncated = virtual_terminal(min_energy, pess.delta);
            let mut next = Vec::with_capacity(m * n);
            let mut stop = Vec::with_capacity(m * n);
            let mut r_sum = 0.0;
            for (k, (sp, e)) in preds.iter().enumerate() {
                let sp_row = row_of(sp, row);
                let (r, done) = match reward {
                    RewardSource::Analytic(env) => env.reward(&s, &a, &sp_row),
                    RewardSource::Model(_) => (rewards[k][row], false),
                };
                r_sum += r;
                stop.push(truncated || done || virtual_terminal(e[row], pess.delta));
                next.push(sp_row);
            }
            let continue_from = (!truncated && !stop[gate * n]).then(|| next[gate * n].clone());
            stats.steps.push(StepRecord {
                s: s.clone(),
                a: a.clone(),
                min_energy,
                truncated,
            });
            if !truncated || cfg.store_truncated {
                rows.push(Sample {
                    s,
                    a,
                    r: r_sum / (m * n) as f64,
                    next,
                    stop,
                    members: m,
                });
            }
            if let Some(sp) = continue_from {
                next_states.push(sp);
            }
        }
        let ds = states.ncols();
        states = Array2::from_shape_vec((next_states.len(), ds), next_states.concat())
            .map_err(|e| PolicyError::Config(e.to_string()))?;
    }
    Ok((rows, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::CliffChain;
    use crate::etm::{EnergyModel, LangevinConfig};
    use crate::norm::Standardizer;
    use crate::rng;

    fn setup() -> (EnergyEnsemble, Actor) {
        let mut r = rng::stream(1);
        let id = Standardizer::identity;
        let members = (0..2)
            .map(|_| EnergyModel::new(&[8], id(1), id(1), id(1), &mut r).unwrap())
            .collect();
        let lang = LangevinConfig {
            steps_latent: 2,
            steps_ambient: 2,
            step_latent: 1e-2,
            step_ambient: 1e-2,
            noise_scale: 0.1,
            delta_clip: 0.5,
        };
        let ens = EnergyEnsemble::new(members, None, lang).unwrap();
        let actor = Actor::new(1, 1, 0.2, &[8], id(1), &mut r).unwrap();
        (ens, actor)
    }

    /// Zero reward, never terminates.
    struct Flat;

    impl Env for Flat {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn action_bound(&self) -> f64 {
            0.2
        }
        fn max_steps(&self) -> usize {
            10
        }
        fn reset(&self, _rng: &mut Stream) -> Vec<f64> {
            vec![0.0]
        }
        fn step(&self, s: &[f64], _a: &[f64]) -> (Vec<f64>, f64, bool) {
            (s.to_vec(), 0.0, false)
        }
        fn reward(&self, _s: &[f64], _a: &[f64], _s_next: &[f64]) -> (f64, bool) {
            (0.0, false)
        }
    }

    fn pess(delta: f64) -> PessimismConfig {
        PessimismConfig {
            delta,
            m: 2,
            n: 3,
            ..PessimismConfig::default()
        }
    }

    #[test]
    fn delta_extremes() {
        let (ens, actor) = setup();
        let env = Flat;
        let starts = Array2::from_shape_fn((7, 1), |(i, _)| -0.9 + 0.1 * i as f64);
        let cfg = RolloutConfig {
            store_truncated: false,
            ..RolloutConfig::default()
        };
        let src = RewardSource::Analytic(&env);
        let (rows, stats) = rollout(&ens, &actor, starts.view(), &cfg, &pess(f64::NEG_INFINITY), src, &mut rng::stream(0)).unwrap();
        assert!(rows.is_empty());
        assert_eq!(stats.synthetic_steps(), 0);
        assert_eq!(stats.truncation_rate(), 1.0);

        let (rows, stats) = rollout(&ens, &actor, starts.view(), &cfg, &pess(f64::INFINITY), src, &mut rng::stream(0)).unwrap();
        assert_eq!(stats.synthetic_steps(), 7 * 5);
        assert_eq!(rows.len(), 35);
        for row in &rows {
            assert_eq!(row.next.len(), 6);
            assert_eq!(row.members, 2);
            assert!(row.stop.iter().all(|s| !s));
        }
    }

    #[test]
    fn stored_truncations_stop_every_successor() {
        let (ens, actor) = setup();
        let env = CliffChain::default();
        let starts = Array2::from_elem((4, 1), 0.0);
        let (rows, stats) = rollout(
            &ens,
            &actor,
            starts.view(),
            &RolloutConfig::default(),
            &pess(f64::NEG_INFINITY),
            RewardSource::Analytic(&env),
            &mut rng::stream(0),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(stats.attempted(), 4);
        assert!(rows.iter().all(|r| r.stop.iter().all(|&s| s)));
    }

    #[test]
    fn reproducible_and_member_count_checked() {
        let (ens, actor) = setup();
        let env = CliffChain::default();
        let starts = Array2::from_shape_fn((5, 1), |(i, _)| 0.1 * i as f64);
        let go = |seed| {
            rollout(
                &ens,
                &actor,
                starts.view(),
                &RolloutConfig::default(),
                &pess(0.0),
                RewardSource::Analytic(&env),
                &mut rng::stream(seed),
            )
            .unwrap()
        };
        assert_eq!(go(4), go(4));
        let bad = PessimismConfig { m: 3, ..pess(0.0) };
        assert!(rollout(
            &ens,
            &actor,
            starts.view(),
            &RolloutConfig::default(),
            &bad,
            RewardSource::Analytic(&env),
            &mut rng::stream(0)
        )
        .is_err());
    }
}
