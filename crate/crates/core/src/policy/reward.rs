use ndarray::{concatenate, Array1, ArrayView2, Axis};

use super::{PolicyError, Result};
use crate::checkpoint::Checkpoint;
use crate::envdata::Dataset;
use crate::ndgrad::{fit_mse, mse, Activation, FitConfig, Mlp};
use crate::norm::Standardizer;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            epochs: 50,
            batch: 256,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// `(s, a, s') -> r` regression network.
#[derive(Clone, Debug)]
pub struct RewardModel {
    net: Mlp,
    norm_x: Standardizer,
    norm_r: Standardizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardReport {
    pub train_curve: Vec<f64>,
    /// Held-out mean squared error in reward units.
    pub val_mse: f64,
}

impl RewardModel {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = concatenate![Axis(1), s, a, s_next];
        if x.ncols() != self.net.input_dim() {
            return Err(PolicyError::Config(format!(
                "reward model expects {} inputs, got {}",
                self.net.input_dim(),
                x.ncols()
            )));
        }
        let y = self.net.predict(self.norm_x.apply(x.view()).view())?;
        Ok(self.norm_r.invert(y.view()).column(0).to_owned())
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_mlp(prefix, &self.net);
        let flat: Vec<f64> = self.norm_x.to_flat().into_iter().chain(self.norm_r.to_flat()).collect();
        ck.insert_array(format!("{prefix}.normalizer"), &[flat.len()], &flat);
    }

    pub fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let net = ck.mlp(prefix)?;
        let (_, flat) = ck.array(&format!("{prefix}.normalizer"))?;
        let n = 2 * net.input_dim();
        let bad = || PolicyError::Config("reward normalizer".into());
        if flat.len() != n + 2 {
            return Err(bad());
        }
        Ok(Self {
            norm_x: Standardizer::from_flat(&flat[..n]).ok_or_else(bad)?,
            norm_r: Standardizer::from_flat(&flat[n..]).ok_or_else(bad)?,
            net,
        })
    }
}

/// MSE training on a 90/10 split; reports held-out error.
pub fn train_reward_model(data: &Dataset, cfg: &RewardConfig) -> Result<(RewardModel, RewardReport)> {
    if data.len() < 2 {
        return Err(PolicyError::Empty);
    }
    let mut rng = rng::substream(cfg.seed, "reward", 0);
    let x = concatenate![
        Axis(1),
        data.states(),
        data.actions(),
        data.next_states()
    ];
    let y = data.rewards().insert_axis(Axis(1));
    let (train, val) = crate::manifold::split_indices(data.len(), &mut rng);
    let (xt, yt) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
    let norm_x = Standardizer::fit(xt.view());
    let norm_r = Standardizer::fit(yt.view());
    let mut dims = vec![x.ncols()];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut net = Mlp::new(&dims, Activation::Relu, &mut rng)?;
    let fit = FitConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
    };
    let train_curve = fit_mse(
        &mut net,
        &norm_x.apply(xt.view()),
        &norm_r.apply(yt.view()),
        &fit,
        &mut rng,
    )?;
    let model = RewardModel { net, norm_x, norm_r };
    let xv = x.select(Axis(0), &val);
    let d = data.ds;
    let pred = model.predict(
        xv.slice(ndarray::s![.., ..d]),
        xv.slice(ndarray::s![.., d..d + data.da]),
        xv.slice(ndarray::s![.., d + data.da..]),
    )?;
    let val_mse = mse(&pred.insert_axis(Axis(1)), &y.select(Axis(0), &val));
    Ok((model, RewardReport { train_curve, val_mse }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::{gen_cliff_offline, Transition};

    fn small() -> RewardConfig {
        RewardConfig {
            hidden: vec![32, 32],
            epochs: 30,
            lr: 3e-3,
            batch: 64,
            seed: 1,
        }
    }

    #[test]
    fn constant_reward_is_learned() {
        let mut d = Dataset::new(1, 1);
        for i in 0..400 {
            let s = (i as f64 / 400.0) * 2.0 - 1.0;
            d.push(Transition {
                s: vec![s],
                a: vec![0.05],
                r: 0.7,
                s_next: vec![s + 0.05],
                done: false,
            })
            .unwrap();
        }
        let (m, rep) = train_reward_model(&d, &small()).unwrap();
        assert!(rep.val_mse < 1e-4);
        let p = m.predict(d.states().view(), d.actions().view(), d.next_states().view()).unwrap();
        assert!(p.iter().all(|v| (v - 0.7).abs() < 1e-2));
    }

    #[test]
    fn cliff_rewards_and_determinism() {
        let d = gen_cliff_offline(1500, 2).unwrap();
        let (m, rep) = train_reward_model(&d, &small()).unwrap();
        assert!(rep.val_mse < 0.05, "{}", rep.val_mse);
        let (m2, rep2) = train_reward_model(&d, &small()).unwrap();
        assert_eq!(rep, rep2);
        assert_eq!(m.net.params(), m2.net.params());
        let mut ck = Checkpoint::default();
        m.save(&mut ck, "reward");
        let back = RewardModel::load(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), "reward").unwrap();
        let x = d.states();
        let a = m.predict(x.view(), d.actions().view(), d.next_states().view()).unwrap();
        let b = back.predict(x.view(), d.actions().view(), d.next_states().view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-4));
    }
}
