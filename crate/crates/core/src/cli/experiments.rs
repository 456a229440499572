//! Desk-scale experiment pipelines shared by the subcommands and the
//! acceptance suite.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::report::{histogram, Cell, ReportTable};
use super::{CliError, Result};
use crate::envdata::{gen_cliff_offline, gen_didactic_dataset, gen_eval_grid, CliffChain, Dataset, EmbeddedSpace};
use crate::etm::{
    train_ensemble, train_etm, train_regressor, EnergyEnsemble, EtmConfig, InferenceInit, LangevinConfig, MpdConfig, NegativeKind,
    RegressorConfig,
};
use crate::manifold::{train_autoencoder, AeConfig, AutoEncoder};
use crate::norm::Standardizer;
use crate::pessimism::{mean_std, ClipMode, PessimismConfig};
use crate::policy::{rollout, train_policy, Actor, PolicyConfig, RewardSource, RolloutConfig, SacConfig};
use crate::rng;

/// Linear-interpolation quantile of unsorted values, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(CliError::Invalid(format!("quantile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Final inference energies of every member on the first `rows` dataset rows.
pub fn training_energies(ens: &EnergyEnsemble, data: &Dataset, rows: usize, init: InferenceInit, seed: u64) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..rows.min(data.len())).collect();
    let d = data.select(&idx);
    let (s, a) = (d.states(), d.actions());
    let mut out = Vec::with_capacity(idx.len() * ens.len());
    for k in 0..ens.len() {
        let (_, e) = ens.predict_next(k, s.view(), a.view(), init, &mut rng::substream(seed, "delta", k as u64))?;
        out.extend(e.iter().copied());
    }
    Ok(out)
}

/// Threshold at quantile `q` of the training-set final energies.
pub fn default_delta(ens: &EnergyEnsemble, data: &Dataset, q: f64, rows: usize, init: InferenceInit, seed: u64) -> Result<f64> {
    quantile(&training_energies(ens, data, rows, init, seed)?, q)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CliError::Invalid(format!("pearson needs equal lengths >= 2, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CliError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Configurations compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Full,
    NoMpd,
    NoTruncation,
    NoPenalty,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoMpd, Arm::NoTruncation, Arm::NoPenalty];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "MC-ETM",
            Arm::NoMpd => "w/o MPD",
            Arm::NoTruncation => "w/o Truncation",
            Arm::NoPenalty => "w/o Penalty",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Offline CliffChain transitions per seed.
    pub n_data: usize,
    pub members: usize,
    pub etm: EtmConfig,
    pub regressor: RegressorConfig,
    /// Inference chain used in rollouts and for the threshold.
    pub langevin: LangevinConfig,
    pub policy: PolicyConfig,
    pub delta_quantile: f64,
    pub delta_rows: usize,
    /// Start states for the out-of-support action probe.
    pub probe_rows: usize,
    /// Actions above this are outside the behavior data.
    pub ood_action: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            n_data: 5_000,
            members: 3,
            etm: EtmConfig {
                hidden: vec![64, 64],
                epochs: 20,
                batch: 256,
                mpd: MpdConfig {
                    n_negatives: 8,
                    chain: LangevinConfig {
                        steps_latent: 3,
                        steps_ambient: 3,
                        step_latent: 1e-2,
                        step_ambient: 1e-2,
                        ..LangevinConfig::default()
                    },
                    ..MpdConfig::default()
                },
                ..EtmConfig::default()
            },
            regressor: RegressorConfig {
                hidden: vec![64, 64],
                epochs: 30,
                ..RegressorConfig::default()
            },
            langevin: LangevinConfig {
                steps_latent: 30,
                steps_ambient: 30,
                noise_scale: 0.1,
                ..LangevinConfig::default()
            },
            policy: PolicyConfig {
                pess: PessimismConfig {
                    m: 3,
                    n: 2,
                    clip: ClipMode::Off,
                    ..PessimismConfig::default()
                },
                rollout: RolloutConfig {
                    init: InferenceInit::Regressor,
                    ..RolloutConfig::default()
                },
                sac: SacConfig {
                    hidden: vec![64, 64],
                    ..SacConfig::default()
                },
                steps: 10_000,
                rollout_starts: 64,
                eval_every: 2_000,
                ..PolicyConfig::default()
            },
            delta_quantile: 0.95,
            delta_rows: 1_000,
            probe_rows: 1_000,
            ood_action: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    /// Final evaluation return per seed.
    pub returns: Vec<f64>,
    pub truncation_rates: Vec<f64>,
    pub synthetic_steps: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Share of out-of-support actions among emitted rollout steps.
    pub ood_emitted: Vec<f64>,
}

impl ArmResult {
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.returns)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    /// Share of out-of-support probe actions among emitted model steps,
    /// per seed, with the quantile threshold and with no threshold.
    pub probe_emitted_delta: Vec<f64>,
    pub probe_emitted_open: Vec<f64>,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|r| r.arm == arm)
    }
}

fn build_ensemble(data: &Dataset, cfg: &AblationConfig, negatives: NegativeKind, seed: u64) -> Result<EnergyEnsemble> {
    let etm = EtmConfig {
        negatives,
        seed,
        ..cfg.etm.clone()
    };
    let (members, _) = train_ensemble(data, None, &etm, cfg.members)?;
    let mut ens = EnergyEnsemble::new(members, None::<AutoEncoder>, cfg.langevin)?;
    let (reg, _) = train_regressor(data, &RegressorConfig { seed, ..cfg.regressor.clone() })?;
    ens.init_regressor = Some(reg);
    Ok(ens)
}

/// Broad probe policy: zero network, so actions are `bound * tanh(N(0, 1))`.
fn probe_actor(ds: usize, da: usize, bound: f64) -> Result<Actor> {
    let mut actor = Actor::new(ds, da, bound, &[8], Standardizer::identity(ds), &mut rng::stream(0))?;
    for p in actor.net.params_mut() {
        p.fill(0.0);
    }
    Ok(actor)
}

/// One-step rollouts of the probe policy; share of emitted steps whose
/// action exceeds `ood_action`.
pub fn ood_emitted_fraction(
    ens: &EnergyEnsemble,
    starts: ArrayView2<f64>,
    pess: &PessimismConfig,
    init: InferenceInit,
    ood_action: f64,
    bound: f64,
    seed: u64,
) -> Result<f64> {
    let env = CliffChain::default();
    let actor = probe_actor(starts.ncols(), 1, bound)?;
    let cfg = RolloutConfig {
        horizon: 1,
        store_truncated: false,
        init,
    };
    let (_, stats) = rollout(
        ens,
        &actor,
        starts,
        &cfg,
        pess,
        RewardSource::Analytic(&env),
        &mut rng::substream(seed, "probe", 0),
    )?;
    Ok(stats.emitted_fraction(|a| a[0] > ood_action))
}

struct Prepared {
    data: Dataset,
    mpd: EnergyEnsemble,
    noise: EnergyEnsemble,
    delta_mpd: f64,
    delta_noise: f64,
}

fn prepare(cfg: &AblationConfig, seed: u64) -> Result<Prepared> {
    let data = gen_cliff_offline(cfg.n_data, seed)?;
    let init = cfg.policy.rollout.init;
    let mpd = build_ensemble(&data, cfg, NegativeKind::Mpd, seed)?;
    let noise = build_ensemble(&data, cfg, NegativeKind::Noise, seed)?;
    let delta_mpd = default_delta(&mpd, &data, cfg.delta_quantile, cfg.delta_rows, init, seed)?;
    let delta_noise = default_delta(&noise, &data, cfg.delta_quantile, cfg.delta_rows, init, seed)?;
    Ok(Prepared {
        data,
        mpd,
        noise,
        delta_mpd,
        delta_noise,
    })
}

struct ArmRun {
    ret: f64,
    truncation_rate: f64,
    synthetic_steps: usize,
    delta: f64,
    ood_emitted: f64,
}

fn run_arm(cfg: &AblationConfig, p: &Prepared, arm: Arm, lambda: f64, seed: u64) -> Result<ArmRun> {
    let env = CliffChain::default();
    let (ens, delta, lambda) = match arm {
        Arm::Full => (&p.mpd, p.delta_mpd, lambda),
        Arm::NoMpd => (&p.noise, p.delta_noise, lambda),
        Arm::NoTruncation => (&p.mpd, f64::INFINITY, lambda),
        Arm::NoPenalty => (&p.mpd, p.delta_mpd, 0.0),
    };
    let pcfg = PolicyConfig {
        pess: PessimismConfig {
            delta,
            lambda,
            m: cfg.members,
            ..cfg.policy.pess.clone()
        },
        seed,
        ..cfg.policy.clone()
    };
    let (_, log) = train_policy(&p.data, ens, &env, RewardSource::Analytic(&env), &pcfg)?;
    let ret = log.final_return().ok_or_else(|| CliError::Invalid("policy run logged no evaluation".into()))?;
    Ok(ArmRun {
        ret,
        truncation_rate: log.rollouts.truncation_rate(),
        synthetic_steps: log.rollouts.synthetic_steps(),
        delta,
        ood_emitted: log.rollouts.emitted_fraction(|a| a[0] > cfg.ood_action),
    })
}

struct SeedRun {
    per_arm: Vec<ArmRun>,
    probe: (f64, f64),
}

fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<SeedRun> {
    let p = prepare(cfg, seed)?;
    let per_arm = Arm::ALL
        .iter()
        .map(|&arm| run_arm(cfg, &p, arm, cfg.policy.pess.lambda, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::substream(seed, "probe-starts", 0);
    let idx: Vec<usize> = (0..cfg.probe_rows).map(|_| r.random_range(0..p.data.len())).collect();
    let starts = p.data.states().select(Axis(0), &idx);
    let pess = |delta| PessimismConfig {
        delta,
        m: cfg.members,
        ..cfg.policy.pess.clone()
    };
    let init = cfg.policy.rollout.init;
    let bound = crate::envdata::CLIFF_ACTION_BOUND;
    let gated = ood_emitted_fraction(&p.mpd, starts.view(), &pess(p.delta_mpd), init, cfg.ood_action, bound, seed)?;
    let open = ood_emitted_fraction(&p.mpd, starts.view(), &pess(f64::INFINITY), init, cfg.ood_action, bound, seed)?;
    Ok(SeedRun {
        per_arm,
        probe: (gated, open),
    })
}

fn check_ablation(cfg: &AblationConfig) -> Result<()> {
    if cfg.seeds.is_empty() || cfg.members == 0 {
        return Err(CliError::Invalid("ablation needs seeds and members".into()));
    }
    Ok(())
}

/// Full method and three ablations on CliffChain with shared seeds. Seeds
/// run in parallel; results equal serial execution.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    check_ablation(cfg)?;
    let runs: Vec<SeedRun> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let arms = Arm::ALL
        .iter()
        .enumerate()
        .map(|(i, &arm)| ArmResult {
            arm,
            returns: runs.iter().map(|r| r.per_arm[i].ret).collect(),
            truncation_rates: runs.iter().map(|r| r.per_arm[i].truncation_rate).collect(),
            synthetic_steps: runs.iter().map(|r| r.per_arm[i].synthetic_steps).collect(),
            deltas: runs.iter().map(|r| r.per_arm[i].delta).collect(),
            ood_emitted: runs.iter().map(|r| r.per_arm[i].ood_emitted).collect(),
        })
        .collect();
    Ok(AblationReport {
        arms,
        probe_emitted_delta: runs.iter().map(|r| r.probe.0).collect(),
        probe_emitted_open: runs.iter().map(|r| r.probe.1).collect(),
    })
}

/// Final returns of the full method for each penalty coefficient, one
/// vector of per-seed returns per entry of `lambdas`.
pub fn run_lambda_sweep(cfg: &AblationConfig, lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_ablation(cfg)?;
    let per_seed: Vec<Vec<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let p = prepare(cfg, seed)?;
            lambdas
                .iter()
                .map(|&l| run_arm(cfg, &p, Arm::Full, l, seed).map(|r| r.ret))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..lambdas.len()).map(|j| per_seed.iter().map(|r| r[j]).collect()).collect())
}

/// Per-row prediction of the member whose final energy is lowest, with
/// `restarts` inference runs per member.
pub fn predict_min_energy(
    ens: &EnergyEnsemble,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    init: InferenceInit,
    restarts: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut pred = Array2::zeros((s.nrows(), ens.ds()));
    let mut energy = Array1::from_elem(s.nrows(), f64::INFINITY);
    for k in 0..ens.len() {
        let (p, e) = ens.predict_best(k, s, a, init, restarts.max(1), &mut rng::substream(seed, "predict", k as u64))?;
        for i in 0..e.len() {
            if e[i] < energy[i] {
                energy[i] = e[i];
                pred.row_mut(i).assign(&p.row(i));
            }
        }
    }
    Ok((pred, energy))
}

fn row_errors(pred: &Array2<f64>, truth: &Array2<f64>) -> Vec<f64> {
    pred.outer_iter()
        .zip(truth.outer_iter())
        .map(|(p, t)| (&p - &t).mapv(|v| v * v).sum().sqrt())
        .collect()
}

/// Mean Euclidean prediction error of every model on every dataset. One
/// row per model, one column per dataset, plus `lowest` naming the dataset
/// with the smallest error in that row.
pub fn eval_dynamics(
    models: &[(String, EnergyEnsemble)],
    datasets: &[(String, Dataset)],
    init: InferenceInit,
    restarts: usize,
    seed: u64,
) -> Result<ReportTable> {
    let mut cols = vec!["model"];
    cols.extend(datasets.iter().map(|(n, _)| n.as_str()));
    cols.push("lowest");
    let mut table = ReportTable::new(&cols);
    if datasets.is_empty() {
        return Ok(table);
    }
    for (name, ens) in models {
        let mut row = vec![Cell::from(name.as_str())];
        let mut best: Option<(f64, &str)> = None;
        for (dname, d) in datasets {
            if d.ds != ens.ds() || d.da != ens.da() {
                return Err(CliError::Invalid(format!(
                    "model `{name}` is {}x{} but dataset `{dname}` is {}x{}",
                    ens.ds(),
                    ens.da(),
                    d.ds,
                    d.da
                )));
            }
            if d.is_empty() {
                return Err(CliError::Invalid(format!("dataset `{dname}` is empty")));
            }
            let (pred, _) = predict_min_energy(ens, d.states().view(), d.actions().view(), init, restarts, seed)?;
            let err = row_errors(&pred, &d.next_states());
            let mean = err.iter().sum::<f64>() / err.len() as f64;
            if best.is_none_or(|(b, _)| mean < b) {
                best = Some((mean, dname));
            }
            row.push(mean.into());
        }
        row.push(best.map_or("", |b| b.1).into());
        table.push(row)?;
    }
    Ok(table)
}

/// Energies and errors of an energy/error correlation run.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrReport {
    /// `None` when either input has zero variance.
    pub r: Option<f64>,
    pub id_energy: Vec<f64>,
    pub ood_energy: Vec<f64>,
    pub id_error: Vec<f64>,
    pub ood_error: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl CorrReport {
    /// Mean OOD energy minus mean ID energy.
    pub fn separation(&self) -> f64 {
        mean(&self.ood_energy) - mean(&self.id_energy)
    }

    /// `metric,value` rows; an undefined correlation becomes an error row.
    pub fn summary(&self) -> Result<ReportTable> {
        let mut t = ReportTable::new(&["metric", "value"]);
        t.push(vec![
            "pearson_r".into(),
            match self.r {
                Some(r) => r.into(),
                None => "error: correlation undefined (zero variance)".into(),
            },
        ])?;
        t.push(vec!["id_mean_energy".into(), mean(&self.id_energy).into()])?;
        t.push(vec!["ood_mean_energy".into(), mean(&self.ood_energy).into()])?;
        t.push(vec!["separation".into(), self.separation().into()])?;
        t.push(vec!["id_mean_error".into(), mean(&self.id_error).into()])?;
        t.push(vec!["ood_mean_error".into(), mean(&self.ood_error).into()])?;
        Ok(t)
    }

    /// Per-row `set,energy,error`.
    pub fn rows(&self) -> Result<ReportTable> {
        let mut t = ReportTable::new(&["set", "energy", "error"]);
        for (set, e, r) in [("id", &self.id_energy, &self.id_error), ("ood", &self.ood_energy, &self.ood_error)] {
            for (&e, &r) in e.iter().zip(r.iter()) {
                t.push(vec![set.into(), e.into(), r.into()])?;
            }
        }
        Ok(t)
    }

    /// Shared-range energy histograms of both sets.
    pub fn histogram(&self, bins: usize) -> Result<ReportTable> {
        let all = self.id_energy.iter().chain(&self.ood_energy);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let (hid, hood) = (histogram(&self.id_energy, lo, hi, bins), histogram(&self.ood_energy, lo, hi, bins));
        let w = (hi - lo) / bins as f64;
        let mut t = ReportTable::new(&["bin_lo", "bin_hi", "id", "ood"]);
        for b in 0..bins {
            let l = lo + w * b as f64;
            t.push(vec![l.into(), (l + w).into(), hid[b].into(), hood[b].into()])?;
        }
        Ok(t)
    }
}

/// Final inference energy against prediction error on an ID and an OOD set.
pub fn energy_corr(
    ens: &EnergyEnsemble,
    id: &Dataset,
    ood: &Dataset,
    init: InferenceInit,
    restarts: usize,
    seed: u64,
) -> Result<CorrReport> {
    if id.is_empty() || ood.is_empty() {
        return Err(CliError::Invalid("energy correlation needs nonempty ID and OOD sets".into()));
    }
    for d in [id, ood] {
        if d.ds != ens.ds() || d.da != ens.da() {
            return Err(CliError::Invalid("dataset and model dimensions differ".into()));
        }
    }
    let eval = |d: &Dataset| -> Result<(Vec<f64>, Vec<f64>)> {
        let (p, e) = predict_min_energy(ens, d.states().view(), d.actions().view(), init, restarts, seed)?;
        Ok((e.to_vec(), row_errors(&p, &d.next_states())))
    };
    let (id_energy, id_error) = eval(id)?;
    let (ood_energy, ood_error) = eval(ood)?;
    let es: Vec<f64> = id_energy.iter().chain(&ood_energy).copied().collect();
    let rs: Vec<f64> = id_error.iter().chain(&ood_error).copied().collect();
    let r = match pearson(&es, &rs) {
        Ok(r) => Some(r),
        Err(CliError::UndefinedCorrelation) => None,
        Err(e) => return Err(e),
    };
    Ok(CorrReport {
        r,
        id_energy,
        ood_energy,
        id_error,
        ood_error,
    })
}

/// Copy of `d` with every `(s, a)` pushed off the data manifold along a
/// random joint direction. The shift length is `U[lo, hi]` times four
/// training standard deviations per coordinate; `s'` is kept.
pub fn off_manifold_shift(d: &Dataset, norm_s: &Standardizer, norm_a: &Standardizer, lo: f64, hi: f64, seed: u64) -> Dataset {
    let mut r = rng::substream(seed, "off-manifold", 0);
    let (ds, da) = (d.ds, d.da);
    let mut out = d.clone();
    for t in out.rows.iter_mut() {
        let dir: Vec<f64> = (0..ds + da).map(|_| rng::normal(&mut r)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let len = rng::uniform(&mut r, lo, hi) * 4.0;
        for j in 0..ds {
            t.s[j] += len * dir[j] / norm * norm_s.std[j];
        }
        for j in 0..da {
            t.a[j] += len * dir[ds + j] / norm * norm_a.std[j];
        }
    }
    out.set_meta("ood", format!("off-manifold shift U[{lo}, {hi}]"));
    out
}

fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Settings of the discontinuity prediction experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscontinuityConfig {
    pub n: usize,
    pub sigma: f64,
    pub etm: EtmConfig,
    pub regressor: RegressorConfig,
    pub langevin: LangevinConfig,
    pub init: InferenceInit,
    pub grid: usize,
    /// Grid points within this distance of a discontinuity line are scored.
    pub band: f64,
}

impl Default for DiscontinuityConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            sigma: 0.05,
            etm: EtmConfig {
                hidden: vec![64, 64, 64],
                epochs: 12,
                batch: 256,
                mpd: MpdConfig {
                    n_negatives: 8,
                    chain: LangevinConfig {
                        steps_latent: 3,
                        steps_ambient: 3,
                        step_latent: 1e-2,
                        step_ambient: 1e-2,
                        ..LangevinConfig::default()
                    },
                    ..MpdConfig::default()
                },
                ..EtmConfig::default()
            },
            regressor: RegressorConfig {
                hidden: vec![64, 64, 64],
                epochs: 60,
                ..RegressorConfig::default()
            },
            langevin: LangevinConfig {
                step_latent: 1e-2,
                step_ambient: 1e-2,
                noise_scale: 0.0,
                ..LangevinConfig::default()
            },
            init: InferenceInit::Regressor,
            grid: 41,
            band: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscontinuityResult {
    pub etm_median: f64,
    pub mlp_median: f64,
    pub points: usize,
}

/// Median |error| of the energy model and of the MSE regressor on grid
/// points near the lines `|s| = 0.5` and `|a| = 0.5`.
pub fn discontinuity_experiment(cfg: &DiscontinuityConfig, seed: u64) -> Result<DiscontinuityResult> {
    let data = gen_didactic_dataset(cfg.n, seed, cfg.sigma)?;
    let (model, _) = train_etm(&data, None, &EtmConfig { seed, ..cfg.etm.clone() })?;
    let (reg, _) = train_regressor(&data, &RegressorConfig { seed, ..cfg.regressor.clone() })?;
    let grid = gen_eval_grid(cfg.grid)?;
    let near_line = |x: f64| (x.abs() - 0.5).abs() <= cfg.band + 1e-9;
    let idx: Vec<usize> = (0..grid.len())
        .filter(|&i| near_line(grid.rows[i].s[0]) || near_line(grid.rows[i].a[0]))
        .collect();
    let g = grid.select(&idx);
    let (s, a, sp) = (g.states(), g.actions(), g.next_states());
    let mlp = reg.predict(s.view(), a.view())?;
    let mut ens = EnergyEnsemble::new(vec![model], None, cfg.langevin)?;
    ens.init_regressor = Some(reg);
    let (pred, _) = ens.predict_next(0, s.view(), a.view(), cfg.init, &mut rng::substream(seed, "predict", 0))?;
    Ok(DiscontinuityResult {
        etm_median: median(&row_errors(&pred, &sp))?,
        mlp_median: median(&row_errors(&mlp, &sp))?,
        points: g.len(),
    })
}

/// Settings shared by the embedded-didactic experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedConfig {
    pub n: usize,
    pub sigma: f64,
    pub embed_state: usize,
    pub embed_action: usize,
    pub ae: AeConfig,
    pub etm: EtmConfig,
    /// Held-out rows per evaluation set.
    pub rows: usize,
}

impl Default for EmbeddedConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            sigma: 0.05,
            embed_state: 16,
            embed_action: 16,
            ae: AeConfig {
                d_m: 2,
                hidden: vec![64, 64, 64],
                epochs: 300,
                lr: 1e-3,
                batch: 256,
                seed: 0,
            },
            etm: EtmConfig {
                hidden: vec![128, 128, 128],
                epochs: 10,
                batch: 256,
                mpd: MpdConfig {
                    n_negatives: 8,
                    chain: LangevinConfig {
                        steps_latent: 3,
                        steps_ambient: 3,
                        step_latent: 1e-2,
                        step_ambient: 1e-2,
                        ..LangevinConfig::default()
                    },
                    ..MpdConfig::default()
                },
                ..EtmConfig::default()
            },
            rows: 500,
        }
    }
}

struct Embedded {
    space: EmbeddedSpace,
    data: Dataset,
    ae: AutoEncoder,
}

fn embedded_setup(cfg: &EmbeddedConfig, seed: u64) -> Result<Embedded> {
    let raw = gen_didactic_dataset(cfg.n, seed, cfg.sigma)?;
    let space = EmbeddedSpace::new(1, 1, cfg.embed_state, cfg.embed_action, seed)?;
    let data = space.lift(&raw)?;
    let (ae, _) = train_autoencoder(&data, &AeConfig { seed, ..cfg.ae.clone() })?;
    Ok(Embedded { space, data, ae })
}

fn heldout(cfg: &EmbeddedConfig, seed: u64, sigma: f64) -> Result<Dataset> {
    Ok(gen_didactic_dataset(cfg.rows, rng::fork_seed(&mut rng::substream(seed, "heldout", 0)), sigma)?)
}

/// Settings of the negative-sampling comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MpdEffectConfig {
    pub base: EmbeddedConfig,
    /// Baseline negatives.
    pub baseline: NegativeKind,
    /// Near-manifold perturbations move the underlying next state by
    /// `U[shift_lo, shift_hi]` with a random sign.
    pub shift_lo: f64,
    pub shift_hi: f64,
}

impl Default for MpdEffectConfig {
    fn default() -> Self {
        Self {
            base: EmbeddedConfig::default(),
            baseline: NegativeKind::Noise,
            shift_lo: 0.1,
            shift_hi: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpdEffectResult {
    pub mpd_rate: f64,
    pub baseline_rate: f64,
}

/// Share of held-out pairs where `E(s, a, perturbed s') > E(s, a, s')`.
pub fn rejection_rate(model: &crate::etm::EnergyModel, d: &Dataset, perturbed: ArrayView2<f64>) -> Result<f64> {
    let (s, a, sp) = (d.states(), d.actions(), d.next_states());
    let pos = model.energy_batch(s.view(), a.view(), sp.view())?;
    let neg = model.energy_batch(s.view(), a.view(), perturbed)?;
    Ok(pos.iter().zip(neg.iter()).filter(|(p, n)| n > p).count() as f64 / d.len() as f64)
}

/// Trains an energy model with manifold negatives and one with the
/// baseline negatives, then scores both on near-manifold perturbations.
pub fn mpd_effect(cfg: &MpdEffectConfig, seed: u64) -> Result<MpdEffectResult> {
    let e = embedded_setup(&cfg.base, seed)?;
    let train = |neg: NegativeKind, ae: Option<&AutoEncoder>| {
        train_etm(&e.data, ae, &EtmConfig { negatives: neg, seed, ..cfg.base.etm.clone() }).map(|(m, _)| m)
    };
    let mpd = train(NegativeKind::Mpd, Some(&e.ae))?;
    let base = train(cfg.baseline, None)?;
    let held_raw = heldout(&cfg.base, seed, cfg.base.sigma)?;
    let held = e.space.lift(&held_raw)?;
    let mut r = rng::substream(seed, "near-manifold", 0);
    let shifted: Vec<f64> = held_raw
        .rows
        .iter()
        .map(|t| {
            let m = rng::uniform(&mut r, cfg.shift_lo, cfg.shift_hi);
            t.s_next[0] + if rng::uniform(&mut r, 0.0, 1.0) < 0.5 { -m } else { m }
        })
        .collect();
    let shifted = Array2::from_shape_vec((shifted.len(), 1), shifted).map_err(|e| CliError::Invalid(e.to_string()))?;
    let perturbed = e.space.state.embed_batch(shifted.view())?;
    Ok(MpdEffectResult {
        mpd_rate: rejection_rate(&mpd, &held, perturbed.view())?,
        baseline_rate: rejection_rate(&base, &held, perturbed.view())?,
    })
}

/// Settings of the energy/error correlation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrConfig {
    pub base: EmbeddedConfig,
    pub members: usize,
    pub regressor: RegressorConfig,
    pub langevin: LangevinConfig,
    pub init: InferenceInit,
    pub shift_lo: f64,
    pub shift_hi: f64,
}

impl Default for CorrConfig {
    fn default() -> Self {
        let base = EmbeddedConfig::default();
        Self {
            base: EmbeddedConfig {
                etm: EtmConfig {
                    epochs: 15,
                    ..base.etm.clone()
                },
                ..base
            },
            members: 3,
            regressor: RegressorConfig {
                hidden: vec![128, 128, 128],
                epochs: 30,
                ..RegressorConfig::default()
            },
            langevin: LangevinConfig {
                step_latent: 1e-2,
                step_ambient: 1e-2,
                noise_scale: 0.0,
                ..LangevinConfig::default()
            },
            init: InferenceInit::Regressor,
            shift_lo: 0.25,
            shift_hi: 3.0,
        }
    }
}

/// Noiseless held-out ID rows and their off-manifold shifted copies, in
/// the embedded space of `space`.
pub fn corr_sets(
    space: &EmbeddedSpace,
    train: &Dataset,
    rows: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let raw = gen_didactic_dataset(rows, rng::fork_seed(&mut rng::substream(seed, "heldout", 0)), 0.0)?;
    let id = space.lift(&raw)?;
    let (ns, na) = (Standardizer::fit(train.states().view()), Standardizer::fit(train.actions().view()));
    let ood = off_manifold_shift(&id, &ns, &na, lo, hi, seed);
    Ok((id, ood))
}

/// Trains an ensemble with manifold negatives on embedded didactic data and
/// correlates final energy with error on ID and shifted OOD sets.
pub fn corr_experiment(cfg: &CorrConfig, seed: u64) -> Result<CorrReport> {
    let e = embedded_setup(&cfg.base, seed)?;
    let etm = EtmConfig { seed, ..cfg.base.etm.clone() };
    let (members, _) = train_ensemble(&e.data, Some(&e.ae), &etm, cfg.members)?;
    let mut ens = EnergyEnsemble::new(members, Some(e.ae), cfg.langevin)?;
    let (reg, _) = train_regressor(&e.data, &RegressorConfig { seed, ..cfg.regressor.clone() })?;
    ens.init_regressor = Some(reg);
    let (id, ood) = corr_sets(&e.space, &e.data, cfg.base.rows, cfg.shift_lo, cfg.shift_hi, seed)?;
    energy_corr(&ens, &id, &ood, cfg.init, 1, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etm::EnergyModel;

    #[test]
    fn pearson_reference_values() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert_eq!(pearson(&xs, &ys).unwrap(), 1.0);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(pearson(&xs, &neg).unwrap(), -1.0);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(CliError::UndefinedCorrelation)));
        assert!(matches!(pearson(&[1.0, 2.0], &[4.0, 4.0]), Err(CliError::UndefinedCorrelation)));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(CliError::Invalid(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(CliError::Invalid(_))));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 2.5);
        let hundred: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile(&hundred, 0.95).unwrap(), 95.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn arm_labels() {
        let labels: Vec<&str> = Arm::ALL.iter().map(|a| a.label()).collect();
        assert_eq!(labels, ["MC-ETM", "w/o MPD", "w/o Truncation", "w/o Penalty"]);
    }

    fn toy_ensemble(ds: usize, seed: u64) -> EnergyEnsemble {
        let id = Standardizer::identity;
        let m = EnergyModel::new(&[8], id(ds), id(1), id(ds), &mut rng::stream(seed)).unwrap();
        let lang = LangevinConfig {
            steps_latent: 2,
            steps_ambient: 2,
            ..LangevinConfig::default()
        };
        EnergyEnsemble::new(vec![m.clone(), m], None, lang).unwrap()
    }

    fn toy_data(ds: usize, n: usize, offset: f64) -> Dataset {
        let mut d = Dataset::new(ds, 1);
        for i in 0..n {
            let x = i as f64 / n as f64;
            d.push(crate::envdata::Transition {
                s: vec![x; ds],
                a: vec![-x],
                r: 0.0,
                s_next: vec![x + offset; ds],
                done: false,
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn eval_dynamics_matrix_shape_and_flag() {
        let models = vec![("a".to_string(), toy_ensemble(2, 1)), ("b".to_string(), toy_ensemble(2, 2))];
        let sets = vec![
            ("near".to_string(), toy_data(2, 10, 0.0)),
            ("far".to_string(), toy_data(2, 10, 50.0)),
        ];
        let t = eval_dynamics(&models, &sets, InferenceInit::LatentNoise, 1, 3).unwrap();
        assert_eq!(t.columns, ["model", "near", "far", "lowest"]);
        assert_eq!(t.len(), 2);
        for row in &t.rows {
            assert_eq!(row[3], Cell::from("near"));
        }
        let again = eval_dynamics(&models, &sets, InferenceInit::LatentNoise, 1, 3).unwrap();
        assert_eq!(t.to_csv(), again.to_csv());
    }

    #[test]
    fn eval_dynamics_edge_cases() {
        let models = vec![("a".to_string(), toy_ensemble(2, 1))];
        let empty = eval_dynamics(&models, &[], InferenceInit::LatentNoise, 1, 0).unwrap();
        assert!(empty.is_empty());
        let wrong = vec![("x".to_string(), toy_data(3, 4, 0.0))];
        assert!(matches!(
            eval_dynamics(&models, &wrong, InferenceInit::LatentNoise, 1, 0),
            Err(CliError::Invalid(_))
        ));
    }

    #[test]
    fn energy_corr_reports_and_tables() {
        let ens = toy_ensemble(1, 5);
        let (id, ood) = (toy_data(1, 20, 0.0), toy_data(1, 20, 3.0));
        let rep = energy_corr(&ens, &id, &ood, InferenceInit::LatentNoise, 1, 0).unwrap();
        assert_eq!(rep.id_energy.len(), 20);
        assert!(rep.r.is_some_and(|r| (-1.0..=1.0).contains(&r)));
        assert_eq!(rep.rows().unwrap().len(), 40);
        let h = rep.histogram(7).unwrap();
        let total: f64 = h.numbers("id").unwrap().iter().chain(&h.numbers("ood").unwrap()).sum();
        assert_eq!(total, 40.0);
        assert!(energy_corr(&ens, &Dataset::new(1, 1), &ood, InferenceInit::LatentNoise, 1, 0).is_err());
    }

    #[test]
    fn undefined_correlation_becomes_error_row() {
        let rep = CorrReport {
            r: None,
            id_energy: vec![1.0, 1.0],
            ood_energy: vec![1.0, 1.0],
            id_error: vec![0.0, 1.0],
            ood_error: vec![2.0, 3.0],
        };
        let t = rep.summary().unwrap();
        let csv = t.to_csv();
        assert!(csv.contains("pearson_r,error: correlation undefined"), "{csv}");
        assert!(!csv.contains("NaN"));
        assert_eq!(rep.separation(), 0.0);
    }

    #[test]
    fn off_manifold_shift_lengths() {
        let d = toy_data(2, 50, 0.0);
        let (ns, na) = (Standardizer::identity(2), Standardizer::identity(1));
        let o = off_manifold_shift(&d, &ns, &na, 0.5, 1.0, 9);
        for (a, b) in d.rows.iter().zip(&o.rows) {
            let sq: f64 = a.s.iter().zip(&b.s).chain(a.a.iter().zip(&b.a)).map(|(x, y)| (x - y).powi(2)).sum();
            let len = sq.sqrt();
            assert!((2.0 - 1e-9..=4.0 + 1e-9).contains(&len), "{len}");
            assert_eq!(a.s_next, b.s_next);
        }
        assert_eq!(o, off_manifold_shift(&d, &ns, &na, 0.5, 1.0, 9));
    }
}
