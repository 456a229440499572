use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::langevin::{langevin, LangevinConfig};
use super::train::{train_etm_from, EtmConfig, EtmLog};
use super::{latent_field, EnergyModel, EtmError, Result};
use crate::checkpoint::Checkpoint;
use crate::envdata::Dataset;
use crate::manifold::AutoEncoder;
use crate::ndgrad::{fit_mse, Activation, FitConfig, Mlp};
use crate::norm::Standardizer;
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200; 4],
            epochs: 100,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Deterministic `(s, a) -> s'` MLP trained on mean squared error.
#[derive(Clone, Debug)]
pub struct Regressor {
    net: Mlp,
    norm_s: Standardizer,
    norm_a: Standardizer,
    norm_sp: Standardizer,
}

impl Regressor {
    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        if s.ncols() != self.norm_s.dim() || a.ncols() != self.norm_a.dim() {
            return Err(EtmError::DimensionMismatch {
                expected: self.net.input_dim(),
                got: s.ncols() + a.ncols(),
            });
        }
        let x = concatenate![Axis(1), self.norm_s.apply(s), self.norm_a.apply(a)];
        Ok(self.norm_sp.invert(self.net.predict(x.view())?.view()))
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_mlp(prefix, &self.net);
        let flat: Vec<f64> = [&self.norm_s, &self.norm_a, &self.norm_sp]
            .iter()
            .flat_map(|n| n.to_flat())
            .collect();
        ck.insert_array(format!("{prefix}.normalizer"), &[flat.len()], &flat);
    }

    fn load(ck: &Checkpoint, prefix: &str, ds: usize, da: usize) -> Result<Self> {
        let net = ck.mlp(prefix)?;
        let (_, flat) = ck.array(&format!("{prefix}.normalizer"))?;
        let [norm_s, norm_a, norm_sp] = split_norms(&flat, ds, da)?;
        Ok(Self {
            net,
            norm_s,
            norm_a,
            norm_sp,
        })
    }
}

fn split_norms(flat: &[f64], ds: usize, da: usize) -> Result<[Standardizer; 3]> {
    if flat.len() != 2 * (2 * ds + da) {
        return Err(EtmError::Config("normalizer length".into()));
    }
    let (fs, rest) = flat.split_at(2 * ds);
    let (fa, fsp) = rest.split_at(2 * da);
    let bad = || EtmError::Config("normalizer".into());
    Ok([
        Standardizer::from_flat(fs).ok_or_else(bad)?,
        Standardizer::from_flat(fa).ok_or_else(bad)?,
        Standardizer::from_flat(fsp).ok_or_else(bad)?,
    ])
}

/// Returns the regressor and its per-epoch training loss (normalized units).
pub fn train_regressor(data: &Dataset, cfg: &RegressorConfig) -> Result<(Regressor, Vec<f64>)> {
    if data.is_empty() {
        return Err(EtmError::EmptyDataset);
    }
    let mut rng = rng::substream(cfg.seed, "regressor", 0);
    let (s, a, sp) = (data.states(), data.actions(), data.next_states());
    let norm_s = Standardizer::fit(s.view());
    let norm_a = Standardizer::fit(a.view());
    let norm_sp = Standardizer::fit(sp.view());
    let mut dims = vec![data.ds + data.da];
    dims.extend(&cfg.hidden);
    dims.push(data.ds);
    let mut net = Mlp::new(&dims, Activation::Relu, &mut rng)?;
    let x = concatenate![Axis(1), norm_s.apply(s.view()), norm_a.apply(a.view())];
    let y = norm_sp.apply(sp.view());
    let fit = FitConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
    };
    let curve = fit_mse(&mut net, &x, &y, &fit, &mut rng)?;
    Ok((
        Regressor {
            net,
            norm_s,
            norm_a,
            norm_sp,
        },
        curve,
    ))
}

/// Where the first inference stage starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceInit {
    /// Encoded prediction of the MLP regressor.
    Regressor,
    /// Standard normal draw in latent space.
    LatentNoise,
}

#[derive(Clone, Debug)]
pub struct EnergyEnsemble {
    pub members: Vec<EnergyModel>,
    /// `None` runs inference directly in (normalized) state space.
    pub ae: Option<AutoEncoder>,
    pub langevin: LangevinConfig,
    pub init_regressor: Option<Regressor>,
}

impl EnergyEnsemble {
    pub fn new(members: Vec<EnergyModel>, ae: Option<AutoEncoder>, langevin: LangevinConfig) -> Result<Self> {
        let first = members.first().ok_or_else(|| EtmError::Config("ensemble needs a member".into()))?;
        let (ds, da) = (first.ds(), first.da());
        if members.iter().any(|m| m.ds() != ds || m.da() != da) {
            return Err(EtmError::Config("members disagree on dimensions".into()));
        }
        if let Some(ae) = &ae {
            if ae.ds() != ds {
                return Err(EtmError::DimensionMismatch {
                    expected: ds,
                    got: ae.ds(),
                });
            }
        }
        Ok(Self {
            members,
            ae,
            langevin,
            init_regressor: None,
        })
    }

    pub fn ds(&self) -> usize {
        self.members[0].ds()
    }

    pub fn da(&self) -> usize {
        self.members[0].da()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn member(&self, i: usize) -> Result<&EnergyModel> {
        self.members
            .get(i)
            .ok_or_else(|| EtmError::Config(format!("no ensemble member {i}")))
    }

    /// Two-stage inference with one member: latent chain on
    /// `H(z) = E(s, a, f_d(z))`, then an ambient chain from `f_d(z)`.
    /// Returns raw next states and their final energies.
    pub fn predict_next(
        &self,
        member: usize,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        init: InferenceInit,
        rng: &mut Stream,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let m = self.member(member)?;
        self.langevin.validate()?;
        let ctx = m.context(s, a)?;
        let b = s.nrows();
        let start = match init {
            InferenceInit::Regressor => {
                let reg = self
                    .init_regressor
                    .as_ref()
                    .ok_or_else(|| EtmError::Config("regressor init requested but none trained".into()))?;
                Some(reg.predict(s, a)?)
            }
            InferenceInit::LatentNoise => None,
        };
        let u1 = match &self.ae {
            Some(ae) => {
                let z0 = match &start {
                    Some(r) => ae.encode_batch(r.view())?,
                    None => Array2::from_shape_fn((b, ae.d_m()), |_| rng::normal(rng)),
                };
                let field = |z: ArrayView2<f64>| latent_field(m, ae, ctx.view(), z);
                let z = if self.langevin.steps_latent > 0 {
                    langevin(field, z0, &self.langevin.latent(), rng, false)?.x
                } else {
                    z0
                };
                m.to_u(ae.decode_batch(z.view())?.view())
            }
            None => {
                let u0 = match &start {
                    Some(r) => m.to_u(r.view()),
                    None => Array2::from_shape_fn((b, m.ds()), |_| rng::normal(rng)),
                };
                let field = |u: ArrayView2<f64>| m.field_u(ctx.view(), u);
                if self.langevin.steps_latent > 0 {
                    langevin(field, u0, &self.langevin.latent(), rng, false)?.x
                } else {
                    u0
                }
            }
        };
        let field = |u: ArrayView2<f64>| m.field_u(ctx.view(), u);
        let run = langevin(field, u1, &self.langevin.ambient(), rng, false)?;
        Ok((m.from_u(run.x.view()), run.energy))
    }

    /// Lowest-energy result over `restarts` independent inference runs.
    pub fn predict_best(
        &self,
        member: usize,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        init: InferenceInit,
        restarts: usize,
        rng: &mut Stream,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let (mut best_x, mut best_e) = self.predict_next(member, s, a, init, rng)?;
        for _ in 1..restarts {
            let (x, e) = self.predict_next(member, s, a, init, rng)?;
            for i in 0..e.len() {
                if e[i] < best_e[i] {
                    best_e[i] = e[i];
                    best_x.row_mut(i).assign(&x.row(i));
                }
            }
        }
        Ok((best_x, best_e))
    }

    /// Minimum final energy over all members and `n_restarts` runs each.
    pub fn min_energy_estimate(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        n_restarts: usize,
        init: InferenceInit,
        rng: &mut Stream,
    ) -> Result<Array1<f64>> {
        if n_restarts == 0 {
            return Err(EtmError::Config("n_restarts must be >= 1".into()));
        }
        let mut best = Array1::from_elem(s.nrows(), f64::INFINITY);
        for k in 0..self.members.len() {
            for _ in 0..n_restarts {
                let (_, e) = self.predict_next(k, s, a, init, rng)?;
                best.zip_mut_with(&e, |b, &v| *b = b.min(v));
            }
        }
        Ok(best)
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        let (ds, da) = (self.ds(), self.da());
        ck.set_meta("etm.members", self.members.len().to_string());
        ck.set_meta("etm.ds", ds.to_string());
        ck.set_meta("etm.da", da.to_string());
        ck.set_meta("etm.manifold", if self.ae.is_some() { "learned" } else { "identity" });
        let l = &self.langevin;
        ck.set_meta(
            "etm.langevin",
            format!(
                "{},{},{},{},{},{}",
                l.steps_latent, l.steps_ambient, l.step_latent, l.step_ambient, l.noise_scale, l.delta_clip
            ),
        );
        let mut flat = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            ck.insert_mlp(&format!("etm.member{i}"), m.net());
            for n in m.normalizers() {
                flat.extend(n.to_flat());
            }
        }
        ck.insert_array("etm.normalizer", &[self.members.len(), flat.len() / self.members.len()], &flat);
        if let Some(ae) = &self.ae {
            ae.save(ck);
        }
        if let Some(r) = &self.init_regressor {
            r.save(ck, "etm.init_regressor");
        }
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let meta_usize = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| EtmError::Config(format!("checkpoint meta `{k}`")))
        };
        let (n, ds, da) = (meta_usize("etm.members")?, meta_usize("etm.ds")?, meta_usize("etm.da")?);
        let (_, flat) = ck.array("etm.normalizer")?;
        let per = flat.len() / n.max(1);
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let [ns, na, nsp] = split_norms(&flat[i * per..(i + 1) * per], ds, da)?;
            members.push(EnergyModel::from_parts(ck.mlp(&format!("etm.member{i}"))?, ns, na, nsp)?);
        }
        let lv: Vec<f64> = ck
            .meta("etm.langevin")
            .unwrap_or("")
            .split(',')
            .filter_map(|v| v.parse().ok())
            .collect();
        let langevin = if lv.len() == 6 {
            LangevinConfig {
                steps_latent: lv[0] as usize,
                steps_ambient: lv[1] as usize,
                step_latent: lv[2],
                step_ambient: lv[3],
                noise_scale: lv[4],
                delta_clip: lv[5],
            }
        } else {
            LangevinConfig::default()
        };
        let ae = match ck.meta("etm.manifold") {
            Some("learned") => Some(AutoEncoder::load(ck)?),
            _ => None,
        };
        let mut ens = Self::new(members, ae, langevin)?;
        if ck.mlp("etm.init_regressor").is_ok() {
            ens.init_regressor = Some(Regressor::load(ck, "etm.init_regressor", ds, da)?);
        }
        Ok(ens)
    }
}

/// Trains `n_members` models on shared normalizers with per-member streams.
/// Members run in parallel; the result equals sequential training.
pub fn train_ensemble(
    data: &Dataset,
    ae: Option<&AutoEncoder>,
    cfg: &EtmConfig,
    n_members: usize,
) -> Result<(Vec<EnergyModel>, Vec<EtmLog>)> {
    if data.is_empty() {
        return Err(EtmError::EmptyDataset);
    }
    if n_members == 0 {
        return Err(EtmError::Config("ensemble needs a member".into()));
    }
    let (s, a, sp) = (data.states(), data.actions(), data.next_states());
    let norm_s = Standardizer::fit(s.view());
    let norm_a = Standardizer::fit(a.view());
    let norm_sp = Standardizer::fit(sp.view());
    let results: Vec<Result<(EnergyModel, EtmLog)>> = (0..n_members)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(cfg.seed, "etm-member", i as u64);
            let model = EnergyModel::new(&cfg.hidden, norm_s.clone(), norm_a.clone(), norm_sp.clone(), &mut rng)?;
            train_etm_from(model, &s, &a, &sp, ae, cfg, &mut rng)
        })
        .collect();
    let mut members = Vec::with_capacity(n_members);
    let mut logs = Vec::with_capacity(n_members);
    for r in results {
        let (m, l) = r?;
        members.push(m);
        logs.push(l);
    }
    Ok((members, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::gen_didactic_dataset;
    use crate::etm::{MpdConfig, NegativeKind};
    use crate::manifold::AeConfig;
    use ndarray::array;

    fn tiny_ensemble(with_ae: bool) -> EnergyEnsemble {
        let mut r = rng::stream(7);
        let id = Standardizer::identity;
        let members = (0..2)
            .map(|_| EnergyModel::new(&[8, 8], id(3), id(1), id(3), &mut r).unwrap())
            .collect();
        let ae = with_ae.then(|| {
            AutoEncoder::new(
                3,
                &AeConfig {
                    d_m: 2,
                    hidden: vec![6],
                    ..AeConfig::default()
                },
                id(3),
                &mut r,
            )
            .unwrap()
        });
        let mut ens = EnergyEnsemble::new(members, ae, LangevinConfig::default()).unwrap();
        let mut data = Dataset::new(3, 1);
        for _ in 0..64 {
            let mut v = || rng::normal(&mut r);
            data.push(crate::envdata::Transition {
                s: vec![v(), v(), v()],
                a: vec![v()],
                r: 0.0,
                s_next: vec![v(), v(), v()],
                done: false,
            })
            .unwrap();
        }
        let cfg = RegressorConfig {
            hidden: vec![8],
            epochs: 2,
            ..RegressorConfig::default()
        };
        ens.init_regressor = Some(train_regressor(&data, &cfg).unwrap().0);
        ens
    }

    #[test]
    fn degenerate_schedule_returns_reconstructed_regressor_output() {
        let mut ens = tiny_ensemble(true);
        ens.langevin.steps_latent = 0;
        ens.langevin.steps_ambient = 0;
        let s = array![[0.1, 0.2, 0.3]];
        let a = array![[0.4]];
        let (x, e) = ens
            .predict_next(0, s.view(), a.view(), InferenceInit::Regressor, &mut rng::stream(0))
            .unwrap();
        let reg = ens.init_regressor.as_ref().unwrap().predict(s.view(), a.view()).unwrap();
        let ae = ens.ae.as_ref().unwrap();
        let want = ae.decode_batch(ae.encode_batch(reg.view()).unwrap().view()).unwrap();
        for (p, q) in x.iter().zip(want.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        let e_direct = ens.members[0].energy_batch(s.view(), a.view(), x.view()).unwrap();
        assert!((e[0] - e_direct[0]).abs() < 1e-12);
    }

    #[test]
    fn noiseless_inference_is_deterministic_and_min_is_monotone() {
        let mut ens = tiny_ensemble(true);
        ens.langevin.noise_scale = 0.0;
        let s = array![[0.1, 0.2, 0.3], [-0.3, 0.0, 0.9]];
        let a = array![[0.4], [-0.1]];
        let p1 = ens
            .predict_next(1, s.view(), a.view(), InferenceInit::Regressor, &mut rng::stream(1))
            .unwrap();
        let p2 = ens
            .predict_next(1, s.view(), a.view(), InferenceInit::Regressor, &mut rng::stream(2))
            .unwrap();
        assert_eq!(p1.0, p2.0);

        ens.langevin.noise_scale = 0.5;
        let mut single = ens.clone();
        single.members.truncate(1);
        let mut r = rng::stream(3);
        let (_, e) = single
            .predict_next(0, s.view(), a.view(), InferenceInit::LatentNoise, &mut r)
            .unwrap();
        let est = single
            .min_energy_estimate(s.view(), a.view(), 1, InferenceInit::LatentNoise, &mut rng::stream(3))
            .unwrap();
        assert_eq!(e, est);
        let est8 = single
            .min_energy_estimate(s.view(), a.view(), 8, InferenceInit::LatentNoise, &mut rng::stream(3))
            .unwrap();
        assert!(est8.iter().zip(est.iter()).all(|(x, y)| x <= y));
        assert!(ens
            .min_energy_estimate(s.view(), a.view(), 0, InferenceInit::LatentNoise, &mut r)
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ens = tiny_ensemble(true);
        let mut ck = Checkpoint::new();
        ens.save(&mut ck);
        let back = EnergyEnsemble::load(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.langevin, ens.langevin);
        let s = array![[0.1, 0.2, 0.3]];
        let a = array![[0.4]];
        let sp = array![[0.0, -0.5, 0.2]];
        let e1 = ens.members[1].energy_batch(s.view(), a.view(), sp.view()).unwrap();
        let e2 = back.members[1].energy_batch(s.view(), a.view(), sp.view()).unwrap();
        assert!((e1[0] - e2[0]).abs() < 1e-4);
        assert!(back.init_regressor.is_some() && back.ae.is_some());
    }

    #[test]
    fn parallel_members_equal_sequential() {
        let data = gen_didactic_dataset(200, 4, 0.05).unwrap();
        let cfg = EtmConfig {
            hidden: vec![8],
            epochs: 2,
            batch: 64,
            mpd: MpdConfig {
                n_negatives: 3,
                ..MpdConfig::default()
            },
            negatives: NegativeKind::Mpd,
            ..EtmConfig::default()
        };
        let (par, _) = train_ensemble(&data, None, &cfg, 3).unwrap();
        let (seq, _) = train_ensemble(&data, None, &cfg, 1).unwrap();
        assert_eq!(par[0].net().params(), seq[0].net().params());
        assert_ne!(par[0].net().params(), par[1].net().params());
    }
}
