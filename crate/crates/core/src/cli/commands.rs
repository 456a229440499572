//! Subcommand bodies. Each reads inputs named by the resolved config and
//! writes its artifacts under the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::experiments::{
    default_delta, energy_corr, eval_dynamics, predict_min_energy, run_ablation, run_lambda_sweep,
    AblationConfig, Arm,
};
use super::report::{svg_histograms, svg_lines, svg_scatter, Cell, ReportTable};
use super::{CliError, Result};
use crate::checkpoint::Checkpoint;
use crate::envdata::{
    gen_cliff_offline, gen_didactic_dataset, load_dataset, save_dataset, CliffChain, Dataset, EmbeddedSpace,
};
use crate::etm::{train_ensemble, train_regressor, EnergyEnsemble, EtmLog, InferenceInit};
use crate::manifold::{train_autoencoder, AutoEncoder};
use crate::pessimism::{bound_sweep, mean_std, SweepRow};
use crate::policy::{train_policy, train_reward_model, RewardSource};

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn checkpoint(&self, name: &str) -> Result<PathBuf> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        Ok(dir.join(name))
    }

    /// Configured path, or `fallback` inside the run directory.
    fn input(&self, key: &str, fallback: &str) -> Result<PathBuf> {
        let v = self.cfg.raw(key)?;
        Ok(if v.is_empty() { self.dir.join(fallback) } else { PathBuf::from(v) })
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        fs::write(self.path(name), body)?;
        Ok(())
    }

    fn table(&self, name: &str, t: &ReportTable) -> Result<()> {
        t.write_csv(&self.path(name))
    }

    fn data(&self) -> Result<Dataset> {
        let p = self.input("io.data", "data.csv")?;
        load_dataset(&p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
    }

    fn ensemble(&self) -> Result<EnergyEnsemble> {
        load_ensemble(&self.input("io.model", "checkpoints/etm.ckpt")?)
    }
}

fn load_ensemble(path: &Path) -> Result<EnergyEnsemble> {
    let ck = Checkpoint::read(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(EnergyEnsemble::load(&ck)?)
}

fn load_ae(path: &Path) -> Result<AutoEncoder> {
    Ok(AutoEncoder::load(&Checkpoint::read(path)?)?)
}

pub(super) fn execute(name: &str, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    let run = Run { cfg, dir };
    match name {
        "gen-data" => gen_data(&run),
        "train-ae" => train_ae(&run).map(|_| ()),
        "train-etm" => train_etm(&run),
        "infer" => infer(&run),
        "eval-dynamics" => dynamics(&run),
        "energy-corr" => corr(&run),
        "train-policy" => policy(&run),
        "verify-bound" => bound(&run),
        "ablate" => ablate(&run),
        other => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn first_coord_plot(title: &str, d: &Dataset) -> String {
    let s: Vec<f64> = d.rows.iter().map(|t| t.s[0]).collect();
    let sp: Vec<f64> = d.rows.iter().map(|t| t.s_next[0]).collect();
    svg_scatter(title, "s[0]", "s'[0]", &[("data", &s, &sp)])
}

fn gen_data(run: &Run) -> Result<()> {
    let cfg = run.cfg;
    let (seed, n) = (cfg.seed()?, cfg.get::<usize>("data.n")?);
    let data = match cfg.env()? {
        "didactic" => gen_didactic_dataset(n, seed, cfg.get("data.sigma")?)?,
        "cliff" => gen_cliff_offline(n, seed)?,
        _ => {
            let space = EmbeddedSpace::new(1, 1, cfg.get("data.embed_state")?, cfg.get("data.embed_action")?, seed)?;
            let sigma = cfg.get("data.sigma")?;
            let raw = gen_didactic_dataset(n, seed, sigma)?;
            let data = space.lift(&raw)?;
            let (id, ood) = super::experiments::corr_sets(
                &space,
                &data,
                cfg.get("corr.rows")?,
                cfg.get("corr.shift_lo")?,
                cfg.get("corr.shift_hi")?,
                seed,
            )?;
            save_dataset(&id, &run.path("heldout_id.csv"))?;
            save_dataset(&ood, &run.path("heldout_ood.csv"))?;
            run.text("data.svg", &first_coord_plot("underlying didactic data", &raw))?;
            save_dataset(&data, &run.path("data.csv"))?;
            println!("wrote {} rows to {}", data.len(), run.path("data.csv").display());
            return Ok(());
        }
    };
    save_dataset(&data, &run.path("data.csv"))?;
    run.text("data.svg", &first_coord_plot("offline data", &data))?;
    println!("wrote {} rows to {}", data.len(), run.path("data.csv").display());
    Ok(())
}

fn train_ae(run: &Run) -> Result<AutoEncoder> {
    let data = run.data()?;
    let (ae, log) = train_autoencoder(&data, &run.cfg.ae()?)?;
    let mut ck = Checkpoint::new();
    ae.save(&mut ck);
    ck.write(&run.checkpoint("ae.ckpt")?)?;
    let mut t = ReportTable::new(&["epoch", "train", "val"]);
    for (i, (tr, va)) in log.train.iter().zip(&log.val).enumerate() {
        t.push(vec![i.into(), (*tr).into(), (*va).into()])?;
    }
    run.table("ae_log.csv", &t)?;
    let epochs: Vec<f64> = (0..log.train.len()).map(|i| i as f64).collect();
    run.text(
        "ae_log.svg",
        &svg_lines("autoencoder loss", "epoch", "mse", &epochs, &[("train", &log.train), ("val", &log.val)]),
    )?;
    println!("autoencoder val mse {:e}", log.val.last().copied().unwrap_or(f64::NAN));
    Ok(ae)
}

fn train_etm(run: &Run) -> Result<()> {
    let cfg = run.cfg;
    let data = run.data()?;
    let ae = if cfg.learned_manifold()? {
        let path = run.input("io.ae", "checkpoints/ae.ckpt")?;
        if path.exists() {
            Some(load_ae(&path)?)
        } else if cfg.raw("io.ae")?.is_empty() {
            Some(train_ae(run)?)
        } else {
            return Err(CliError::Invalid(format!("{} does not exist", path.display())));
        }
    } else {
        None
    };
    let (members, logs) = train_ensemble(&data, ae.as_ref(), &cfg.etm()?, cfg.get("etm.members")?)?;
    let mut ens = EnergyEnsemble::new(members, ae, cfg.langevin()?)?;
    if cfg.init()? == InferenceInit::Regressor {
        ens.init_regressor = Some(train_regressor(&data, &cfg.regressor()?)?.0);
    }
    let mut ck = Checkpoint::new();
    ens.save(&mut ck);
    ck.write(&run.checkpoint("etm.ckpt")?)?;
    write_etm_logs(run, &logs)?;
    println!("trained {} energy models on {} rows", ens.len(), data.len());
    Ok(())
}

fn write_etm_logs(run: &Run, logs: &[EtmLog]) -> Result<()> {
    let mut t = ReportTable::new(&["member", "epoch", "loss_nce", "loss_grad"]);
    for (m, log) in logs.iter().enumerate() {
        for (e, (nce, grad)) in log.loss_nce.iter().zip(&log.loss_grad).enumerate() {
            t.push(vec![m.into(), e.into(), (*nce).into(), (*grad).into()])?;
        }
    }
    run.table("etm_log.csv", &t)?;
    let epochs: Vec<f64> = (0..logs.first().map_or(0, |l| l.loss_nce.len())).map(|i| i as f64).collect();
    let names: Vec<String> = (0..logs.len()).map(|m| format!("member {m}")).collect();
    let series: Vec<(&str, &[f64])> = names.iter().zip(logs).map(|(n, l)| (n.as_str(), l.loss_nce.as_slice())).collect();
    run.text("etm_log.svg", &svg_lines("InfoNCE loss", "epoch", "loss", &epochs, &series))
}

fn infer(run: &Run) -> Result<()> {
    let (data, ens) = (run.data()?, run.ensemble()?);
    if data.ds != ens.ds() || data.da != ens.da() {
        return Err(CliError::Invalid("dataset and model dimensions differ".into()));
    }
    let (s, a, sp) = (data.states(), data.actions(), data.next_states());
    let (pred, energy) = predict_min_energy(&ens, s.view(), a.view(), run.cfg.init()?, run.cfg.get("infer.restarts")?, run.cfg.seed()?)?;
    let mut cols = vec!["row".to_string(), "energy".into(), "error".into()];
    cols.extend((0..ens.ds()).map(|j| format!("pred_{j}")));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut t = ReportTable::new(&cols);
    for i in 0..data.len() {
        let err = (&pred.row(i) - &sp.row(i)).mapv(|v| v * v).sum().sqrt();
        let mut row: Vec<Cell> = vec![i.into(), energy[i].into(), err.into()];
        row.extend(pred.row(i).iter().map(|&v| Cell::from(v)));
        t.push(row)?;
    }
    run.table("predictions.csv", &t)?;
    let errs = t.numbers("error")?;
    println!("mean error {:e} over {} rows", errs.iter().sum::<f64>() / errs.len().max(1) as f64, errs.len());
    Ok(())
}

fn named_list(list: &str) -> Result<Vec<(String, PathBuf)>> {
    list.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (n, path) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected NAME=PATH, got `{p}`")))?;
            Ok((n.trim().to_string(), PathBuf::from(path.trim())))
        })
        .collect()
}

fn dynamics(run: &Run) -> Result<()> {
    let models = named_list(run.cfg.raw("io.models")?)?
        .into_iter()
        .map(|(n, p)| Ok((n, load_ensemble(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    let datasets = named_list(run.cfg.raw("io.datasets")?)?
        .into_iter()
        .map(|(n, p)| Ok((n, load_dataset(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    let t = eval_dynamics(&models, &datasets, run.cfg.init()?, run.cfg.get("infer.restarts")?, run.cfg.seed()?)?;
    run.table("dynamics.csv", &t)?;
    println!("{} x {} error matrix", models.len(), datasets.len());
    Ok(())
}

fn corr(run: &Run) -> Result<()> {
    let ens = run.ensemble()?;
    let id = load_dataset(&run.input("io.id", "heldout_id.csv")?)?;
    let ood = load_dataset(&run.input("io.ood", "heldout_ood.csv")?)?;
    let rep = energy_corr(&ens, &id, &ood, run.cfg.init()?, run.cfg.get("infer.restarts")?, run.cfg.seed()?)?;
    run.table("corr_summary.csv", &rep.summary()?)?;
    run.table("corr_rows.csv", &rep.rows()?)?;
    let bins = run.cfg.get("corr.bins")?;
    run.table("corr_hist.csv", &rep.histogram(bins)?)?;
    run.text(
        "corr_scatter.svg",
        &svg_scatter(
            "final energy against prediction error",
            "energy",
            "error",
            &[("ID", &rep.id_energy, &rep.id_error), ("OOD", &rep.ood_energy, &rep.ood_error)],
        ),
    )?;
    run.text(
        "corr_hist.svg",
        &svg_histograms("final energy", "energy", &[("ID", &rep.id_energy), ("OOD", &rep.ood_energy)], bins),
    )?;
    match rep.r {
        Some(r) => println!("pearson r {r:.4}, separation {:.4}", rep.separation()),
        None => println!("pearson r undefined (zero variance), separation {:.4}", rep.separation()),
    }
    Ok(())
}

fn policy(run: &Run) -> Result<()> {
    let cfg = run.cfg;
    let data = run.data()?;
    let env = CliffChain::default();
    if data.ds != 1 || data.da != 1 {
        return Err(CliError::Invalid("train-policy runs on CliffChain data (1-D state and action)".into()));
    }
    let mut ens = run.ensemble()?;
    ens.langevin = cfg.rollout_langevin()?;
    let init = cfg.init()?;
    let delta = match cfg.delta()? {
        Some(d) => d,
        None => default_delta(&ens, &data, cfg.get("pess.delta_quantile")?, cfg.get("pess.delta_rows")?, init, cfg.seed()?)?,
    };
    let pcfg = cfg.policy(delta)?;
    if pcfg.pess.m != ens.len() {
        return Err(CliError::Invalid(format!(
            "etm.members = {} but the checkpoint holds {} models",
            pcfg.pess.m,
            ens.len()
        )));
    }
    let reward_model = if cfg.model_reward()? {
        Some(train_reward_model(&data, &cfg.reward()?)?.0)
    } else {
        None
    };
    let source = match &reward_model {
        Some(m) => RewardSource::Model(m),
        None => RewardSource::Analytic(&env),
    };
    let (ac, log) = train_policy(&data, &ens, &env, source, &pcfg)?;
    let mut ck = Checkpoint::new();
    ac.save(&mut ck);
    ck.write(&run.checkpoint("policy.ckpt")?)?;
    run.text("policy_log.csv", &log.to_csv())?;
    let steps: Vec<f64> = log.rows.iter().map(|r| r.step as f64).collect();
    let rets: Vec<f64> = log.rows.iter().map(|r| r.mean_return).collect();
    run.text("policy_log.svg", &svg_lines("evaluation return", "gradient step", "return", &steps, &[("return", &rets)]))?;
    let mut t = ReportTable::new(&["metric", "value"]);
    t.push(vec!["delta".into(), delta.into()])?;
    t.push(vec!["final_return".into(), log.final_return().unwrap_or(f64::NAN).into()])?;
    t.push(vec!["truncation_rate".into(), log.rollouts.truncation_rate().into()])?;
    t.push(vec!["synthetic_steps".into(), log.rollouts.synthetic_steps().into()])?;
    run.table("policy_summary.csv", &t)?;
    println!("final return {:.3} (delta {delta:.4})", log.final_return().unwrap_or(f64::NAN));
    Ok(())
}

fn bound(run: &Run) -> Result<()> {
    let rows = bound_sweep(run.cfg.get("bound.instances")?, run.cfg.seed()?, run.cfg.get("bound.gamma")?)?;
    let mut csv = String::from(SweepRow::csv_header());
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    run.text("bound.csv", &csv)?;
    let lhs: Vec<f64> = rows.iter().map(|r| r.report.lhs).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r.report.rhs()).collect();
    run.text("bound.svg", &svg_scatter("performance gap against bound", "bound", "gap", &[("instances", &rhs, &lhs)]))?;
    let eligible = rows.iter().filter(|r| r.report.assumption_ok).count();
    let held = rows.iter().filter(|r| r.report.assumption_ok && r.report.holds).count();
    println!("bound holds on {held}/{eligible} instances satisfying the assumption ({} total)", rows.len());
    Ok(())
}

/// Desk-scale ablation settings with the config's overrides applied.
pub(super) fn ablation_config(cfg: &RunConfig) -> Result<AblationConfig> {
    let mut a = AblationConfig::default();
    let seed = cfg.seed()?;
    a.seeds = (seed..seed + cfg.get::<u64>("ablate.seeds")?).collect();
    a.n_data = cfg.get("ablate.n_data")?;
    a.members = cfg.get("ablate.members")?;
    a.etm.epochs = cfg.get("ablate.etm_epochs")?;
    a.policy.steps = cfg.get("ablate.steps")?;
    a.policy.eval_every = (a.policy.steps / 5).max(1);
    a.policy.pess.lambda = cfg.get("pess.lambda")?;
    a.delta_quantile = cfg.get("pess.delta_quantile")?;
    a.delta_rows = cfg.get("pess.delta_rows")?;
    a.probe_rows = cfg.get("ablate.probe_rows")?;
    a.ood_action = cfg.get("ablate.ood_action")?;
    a.policy.pess.validate()?;
    Ok(a)
}

fn ablate(run: &Run) -> Result<()> {
    let mut cfg = ablation_config(run.cfg)?;
    if run.cfg.get::<bool>("ablate.sweep")? {
        let lambdas = [0.5, 1.0, 1.5, 2.0, 2.5];
        let sweep = run_lambda_sweep(&cfg, &lambdas)?;
        let mut t = ReportTable::new(&["lambda", "mean_return", "std_return"]);
        let mut best = (f64::NEG_INFINITY, cfg.policy.pess.lambda);
        for (&l, rets) in lambdas.iter().zip(&sweep) {
            let (m, s) = mean_std(rets);
            if m > best.0 {
                best = (m, l);
            }
            t.push(vec![l.into(), m.into(), s.into()])?;
        }
        run.table("sweep.csv", &t)?;
        cfg.policy.pess.lambda = best.1;
        println!("selected lambda {}", best.1);
    }
    let rep = run_ablation(&cfg)?;
    let mut t = ReportTable::new(&[
        "config",
        "lambda",
        "mean_return",
        "std_return",
        "truncation_rate",
        "synthetic_steps",
        "delta",
        "ood_emitted",
    ]);
    let mut per_seed = ReportTable::new(&["config", "seed", "return", "truncation_rate", "synthetic_steps", "delta", "ood_emitted"]);
    for r in &rep.arms {
        let (m, s) = r.mean_std();
        let lambda = if r.arm == Arm::NoPenalty { 0.0 } else { cfg.policy.pess.lambda };
        let n = r.returns.len() as f64;
        t.push(vec![
            r.arm.label().into(),
            lambda.into(),
            m.into(),
            s.into(),
            (r.truncation_rates.iter().sum::<f64>() / n).into(),
            (r.synthetic_steps.iter().sum::<usize>() as f64 / n).into(),
            (r.deltas.iter().sum::<f64>() / n).into(),
            (r.ood_emitted.iter().sum::<f64>() / n).into(),
        ])?;
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            per_seed.push(vec![
                r.arm.label().into(),
                (seed as usize).into(),
                r.returns[i].into(),
                r.truncation_rates[i].into(),
                r.synthetic_steps[i].into(),
                r.deltas[i].into(),
                r.ood_emitted[i].into(),
            ])?;
        }
        println!("{:16} {m:9.3} +- {s:.3}", r.arm.label());
    }
    run.table("ablation.csv", &t)?;
    run.table("ablation_seeds.csv", &per_seed)?;
    let mut probe = ReportTable::new(&["seed", "ood_emitted_quantile_delta", "ood_emitted_open"]);
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        probe.push(vec![
            (seed as usize).into(),
            rep.probe_emitted_delta[i].into(),
            rep.probe_emitted_open[i].into(),
        ])?;
    }
    run.table("ablation_probe.csv", &probe)?;
    Ok(())
}
