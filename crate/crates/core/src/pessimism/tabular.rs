use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::{PessimismError, Result};
use crate::rng;

const STOCH_TOL: f64 = 1e-9;
const VI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 200_000;

/// Finite discounted MDP. `p[[s, a, s']]`, `r[[s, a]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub p: Array3<f64>,
    pub r: Array2<f64>,
    pub gamma: f64,
    pub rho0: Array1<f64>,
}

/// Boolean `(s, a)` membership mask; `true` marks an out-of-distribution pair.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSet {
    pub mask: Array2<bool>,
}

impl OodSet {
    pub fn empty(n_s: usize, n_a: usize) -> Self {
        Self {
            mask: Array2::from_elem((n_s, n_a), false),
        }
    }

    pub fn all(n_s: usize, n_a: usize) -> Self {
        Self {
            mask: Array2::from_elem((n_s, n_a), true),
        }
    }

    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.mask[[s, a]]
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.mapv(|b| !b),
        }
    }
}

/// How the next-state value is formed from `Q`.
#[derive(Clone, Copy, Debug)]
pub enum Backup<'a> {
    Greedy,
    /// Stochastic policy, `pi[[s, a]]`.
    Policy(&'a Array2<f64>),
}

impl Backup<'_> {
    fn values(&self, q: &Array2<f64>) -> Array1<f64> {
        match self {
            Backup::Greedy => q.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v))),
            Backup::Policy(pi) => (q * *pi).sum_axis(Axis(1)),
        }
    }
}

fn check_kernel(p: &Array3<f64>, what: &'static str) -> Result<()> {
    for ((s, a), row) in p.lanes(Axis(2)).into_iter().enumerate().map(|(i, row)| ((i / p.dim().1, i % p.dim().1), row)) {
        let sum: f64 = row.sum();
        if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > STOCH_TOL {
            return Err(PessimismError::NotStochastic { what, s, a });
        }
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(p: Array3<f64>, r: Array2<f64>, gamma: f64, rho0: Array1<f64>) -> Result<Self> {
        let (n_s, n_a, n_s2) = p.dim();
        if n_s == 0 || n_a == 0 || n_s2 != n_s || r.dim() != (n_s, n_a) || rho0.len() != n_s {
            return Err(PessimismError::Shape(format!(
                "P {:?}, R {:?}, rho0 {}",
                p.dim(),
                r.dim(),
                rho0.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(PessimismError::Config(format!("gamma must lie in (0,1), got {gamma}")));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(PessimismError::Config("rewards must be finite".into()));
        }
        if rho0.iter().any(|&x| !(x >= 0.0)) || (rho0.sum() - 1.0).abs() > STOCH_TOL {
            return Err(PessimismError::Config("rho0 is not a distribution".into()));
        }
        check_kernel(&p, "P")?;
        Ok(Self { p, r, gamma, rho0 })
    }

    pub fn n_s(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_a(&self) -> usize {
        self.r.ncols()
    }

    pub fn r_max(&self) -> f64 {
        self.r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn v_max(&self) -> f64 {
        self.r_max() / (1.0 - self.gamma)
    }

    fn check_compatible(&self, model_p: &Array3<f64>, ood: &OodSet) -> Result<()> {
        if model_p.dim() != self.p.dim() || ood.mask.dim() != self.r.dim() {
            return Err(PessimismError::Shape(format!(
                "model {:?} / ood {:?} vs mdp {:?}",
                model_p.dim(),
                ood.mask.dim(),
                self.p.dim()
            )));
        }
        check_kernel(model_p, "model_P")
    }
}

/// `E_{s'~P(s,a)} v(s')` for every pair.
fn expect(p: &Array3<f64>, v: &Array1<f64>) -> Array2<f64> {
    let (n_s, n_a, _) = p.dim();
    Array2::from_shape_fn((n_s, n_a), |(s, a)| p.slice(ndarray::s![s, a, ..]).dot(v))
}

/// `r + gamma * 1[(s,a) not in U] * E_{model_P}[Q(s', .)]`.
pub fn hybrid_bellman(
    mdp: &TabularMdp,
    model_p: &Array3<f64>,
    ood: &OodSet,
    q: &Array2<f64>,
    backup: Backup,
) -> Result<Array2<f64>> {
    penalized_operator(mdp, model_p, ood, &Array2::zeros(mdp.r.raw_dim()), 0.0, q, backup)
}

/// `r - beta * u * 1[not U] + gamma * 1[not U] * E_{model_P}[Q(s', .)]`.
pub fn penalized_operator(
    mdp: &TabularMdp,
    model_p: &Array3<f64>,
    ood: &OodSet,
    u: &Array2<f64>,
    beta: f64,
    q: &Array2<f64>,
    backup: Backup,
) -> Result<Array2<f64>> {
    mdp.check_compatible(model_p, ood)?;
    if u.dim() != mdp.r.dim() || u.iter().any(|v| !v.is_finite()) || !(beta >= 0.0) {
        return Err(PessimismError::Config("u must be finite with the shape of R, beta >= 0".into()));
    }
    Ok(apply(mdp, model_p, ood, u, beta, q, backup))
}

fn apply(
    mdp: &TabularMdp,
    model_p: &Array3<f64>,
    ood: &OodSet,
    u: &Array2<f64>,
    beta: f64,
    q: &Array2<f64>,
    backup: Backup,
) -> Array2<f64> {
    let next = expect(model_p, &backup.values(q));
    let mut out = mdp.r.clone();
    ndarray::Zip::from(&mut out)
        .and(&next)
        .and(&ood.mask)
        .and(u)
        .for_each(|o, &n, &in_u, &uv| {
            if !in_u {
                *o += mdp.gamma * n - beta * uv;
            }
        });
    out
}

/// Iterates `op` from zero until successive iterates differ by less than `1e-14` in sup norm.
pub fn fixed_point<F>(shape: (usize, usize), mut op: F) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> Array2<f64>,
{
    let mut q = Array2::zeros(shape);
    for _ in 0..MAX_SWEEPS {
        let next = op(&q);
        let diff = (&next - &q).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        q = next;
        if diff <= VI_TOL * (1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return Ok(q);
        }
    }
    Err(PessimismError::NoConvergence(MAX_SWEEPS))
}

/// Optimal `Q` of the MDP under its own kernel.
pub fn value_iteration(mdp: &TabularMdp) -> Result<Array2<f64>> {
    let ood = OodSet::empty(mdp.n_s(), mdp.n_a());
    let zero = Array2::zeros(mdp.r.raw_dim());
    fixed_point(mdp.r.dim(), |q| apply(mdp, &mdp.p, &ood, &zero, 0.0, q, Backup::Greedy))
}

/// `Q^pi` of the MDP under its own kernel.
pub fn policy_value(mdp: &TabularMdp, pi: &Array2<f64>) -> Result<Array2<f64>> {
    let ood = OodSet::empty(mdp.n_s(), mdp.n_a());
    let zero = Array2::zeros(mdp.r.raw_dim());
    fixed_point(mdp.r.dim(), |q| apply(mdp, &mdp.p, &ood, &zero, 0.0, q, Backup::Policy(pi)))
}

/// Deterministic greedy policy as a one-hot matrix; ties go to the lowest action index.
pub fn greedy_policy(q: &Array2<f64>) -> Array2<f64> {
    let mut pi = Array2::zeros(q.raw_dim());
    for (s, row) in q.outer_iter().enumerate() {
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        pi[[s, best]] = 1.0;
    }
    pi
}

/// Augmented MDP with an absorbing zero-reward state `nS`; OOD pairs move there with probability 1.
pub fn build_pessimistic_mdp(mdp: &TabularMdp, model_p: &Array3<f64>, ood: &OodSet) -> Result<TabularMdp> {
    mdp.check_compatible(model_p, ood)?;
    let (n_s, n_a) = (mdp.n_s(), mdp.n_a());
    let bot = n_s;
    let mut p = Array3::zeros((n_s + 1, n_a, n_s + 1));
    let mut r = Array2::zeros((n_s + 1, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            r[[s, a]] = mdp.r[[s, a]];
            if ood.contains(s, a) {
                p[[s, a, bot]] = 1.0;
            } else {
                for s2 in 0..n_s {
                    p[[s, a, s2]] = model_p[[s, a, s2]];
                }
            }
        }
    }
    for a in 0..n_a {
        p[[bot, a, bot]] = 1.0;
    }
    let mut rho0 = Array1::zeros(n_s + 1);
    rho0.slice_mut(ndarray::s![..n_s]).assign(&mdp.rho0);
    TabularMdp::new(p, r, mdp.gamma, rho0)
}

/// `P(exists t <= horizon: (s_t, a_t) in U | s_0 = s)` under `pi` and the true kernel;
/// `None` iterates to convergence, giving the probability of ever hitting `U`.
pub fn hitting_probability(mdp: &TabularMdp, ood: &OodSet, pi: &Array2<f64>, horizon: Option<usize>) -> Array1<f64> {
    let (n_s, n_a) = (mdp.n_s(), mdp.n_a());
    let step = |h: &Array1<f64>| -> Array1<f64> {
        let next = expect(&mdp.p, h);
        Array1::from_shape_fn(n_s, |s| {
            (0..n_a)
                .map(|a| pi[[s, a]] * if ood.contains(s, a) { 1.0 } else { next[[s, a]] })
                .sum()
        })
    };
    let mut h = step(&Array1::zeros(n_s));
    match horizon {
        Some(n) => {
            for _ in 0..n {
                h = step(&h);
            }
        }
        None => {
            for _ in 0..MAX_SWEEPS {
                let next = step(&h);
                let diff = (&next - &h).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                h = next;
                if diff < 1e-16 {
                    break;
                }
            }
        }
    }
    h
}

/// `(V^pi - V^pi_MC, V_max * P(tau_U < inf))` per state, where `V^pi_MC` is the value in the
/// truncated MDP built on the true kernel.
pub fn truncation_gap(mdp: &TabularMdp, ood: &OodSet, pi: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let n_s = mdp.n_s();
    let v = state_values(&policy_value(mdp, pi)?, pi);
    let pess = build_pessimistic_mdp(mdp, &mdp.p, ood)?;
    let mut pi_aug = Array2::from_elem((n_s + 1, mdp.n_a()), 1.0 / mdp.n_a() as f64);
    pi_aug.slice_mut(ndarray::s![..n_s, ..]).assign(pi);
    let v_mc = state_values(&policy_value(&pess, &pi_aug)?, &pi_aug);
    let gap = &v - &v_mc.slice(ndarray::s![..n_s]);
    let bound = hitting_probability(mdp, ood, pi, None) * mdp.v_max();
    Ok((gap, bound))
}

fn state_values(q: &Array2<f64>, pi: &Array2<f64>) -> Array1<f64> {
    (q * pi).sum_axis(Axis(1))
}

/// Smallest horizon with `gamma^H <= 1e-15`.
pub fn default_horizon(gamma: f64) -> usize {
    (1e-15f64.ln() / gamma.ln()).ceil() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub consistency_term: f64,
    pub truncation_term: f64,
    pub beta: f64,
    pub horizon: usize,
    pub v_max: f64,
    pub r_max: f64,
    /// Model Bellman error within `beta * u` on every in-distribution pair.
    pub assumption_ok: bool,
    /// Smallest `beta` for which the error predicate holds.
    pub beta_min: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn rhs(&self) -> f64 {
        self.consistency_term + self.truncation_term
    }
}

/// Largest `|gamma * (model_P - P) v| / u` over in-distribution pairs.
fn error_ratio(mdp: &TabularMdp, model_p: &Array3<f64>, ood: &OodSet, u: &Array2<f64>, v: &Array1<f64>) -> f64 {
    let diff = &expect(model_p, v) - &expect(&mdp.p, v);
    let mut worst = 0.0f64;
    for ((s, a), d) in diff.indexed_iter() {
        if ood.contains(s, a) {
            continue;
        }
        let err = (mdp.gamma * d).abs();
        let ratio = if err <= 1e-12 {
            0.0
        } else if u[[s, a]] > 0.0 {
            err / u[[s, a]]
        } else {
            f64::INFINITY
        };
        worst = worst.max(ratio);
    }
    worst
}

/// Compares the suboptimality of the policy greedy on the penalized fixed point with the
/// consistency and truncation terms, all computed exactly.
///
/// The error predicate is evaluated at the penalized values of both the learned and the
/// optimal policy.
pub fn verify_bound(
    mdp: &TabularMdp,
    model_p: &Array3<f64>,
    ood: &OodSet,
    u: &Array2<f64>,
    beta: f64,
    horizon: usize,
) -> Result<BoundReport> {
    let dim = mdp.r.dim();
    penalized_operator(mdp, model_p, ood, u, beta, &Array2::zeros(dim), Backup::Greedy)?;

    let pi_star = greedy_policy(&value_iteration(mdp)?);
    let q_hat = fixed_point(dim, |q| apply(mdp, model_p, ood, u, beta, q, Backup::Greedy))?;
    let pi_hat = greedy_policy(&q_hat);
    let j = |pi: &Array2<f64>| -> Result<f64> { Ok(mdp.rho0.dot(&state_values(&policy_value(mdp, pi)?, pi))) };
    let lhs = j(&pi_star)? - j(&pi_hat)?;

    let q_hat_star = fixed_point(dim, |q| apply(mdp, model_p, ood, u, beta, q, Backup::Policy(&pi_star)))?;
    let beta_min = error_ratio(mdp, model_p, ood, u, &state_values(&q_hat, &pi_hat))
        .max(error_ratio(mdp, model_p, ood, u, &state_values(&q_hat_star, &pi_star)));
    let assumption_ok = beta_min <= beta + 1e-12;

    // state occupancy of pi* under the true kernel, t = 0..=H
    let penalty = Array2::from_shape_fn(dim, |(s, a)| if ood.contains(s, a) { 0.0 } else { beta * u[[s, a]] });
    let per_state = state_values(&penalty, &pi_star);
    let mut d = mdp.rho0.clone();
    let mut consistency = 0.0;
    let mut disc = 1.0;
    for t in 0..=horizon {
        consistency += disc * d.dot(&per_state);
        if t < horizon {
            let mut next = Array1::zeros(mdp.n_s());
            for s in 0..mdp.n_s() {
                for a in 0..mdp.n_a() {
                    let w = d[s] * pi_star[[s, a]];
                    if w != 0.0 {
                        next.scaled_add(w, &mdp.p.slice(ndarray::s![s, a, ..]));
                    }
                }
            }
            d = next;
            disc *= mdp.gamma;
        }
    }
    let consistency_term = 2.0 * consistency;
    let hit = mdp.rho0.dot(&hitting_probability(mdp, ood, &pi_star, Some(horizon)));
    let truncation_term = 2.0 * mdp.v_max() * hit;
    Ok(BoundReport {
        lhs,
        consistency_term,
        truncation_term,
        beta,
        horizon,
        v_max: mdp.v_max(),
        r_max: mdp.r_max(),
        assumption_ok,
        beta_min,
        holds: lhs <= consistency_term + truncation_term + 1e-9,
    })
}

/// One randomized verification problem.
#[derive(Clone, Debug)]
pub struct BoundInstance {
    pub mdp: TabularMdp,
    pub model_p: Array3<f64>,
    pub ood: OodSet,
    pub u: Array2<f64>,
    pub beta: f64,
}

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    let w = Array1::from_shape_fn(n, |_| -(1.0 - rng.random::<f64>()).ln());
    let sum = w.sum();
    w / sum
}

/// Random `n_s`-state / `n_a`-action instance with rewards in `[0, 1]`, a model kernel mixed
/// with a random kernel, roughly a quarter of pairs marked OOD, and
/// `u = gamma * TV(model_P, P) * V_max`, `beta = 1`.
pub fn random_instance(seed: u64, n_s: usize, n_a: usize, gamma: f64) -> Result<BoundInstance> {
    let mut g = rng::substream(seed, "tabular", 0);
    let mut p = Array3::zeros((n_s, n_a, n_s));
    let mut model_p = Array3::zeros((n_s, n_a, n_s));
    let mix = 0.3 * g.random::<f64>();
    for s in 0..n_s {
        for a in 0..n_a {
            let row = simplex(&mut g, n_s);
            let noise = simplex(&mut g, n_s);
            p.slice_mut(ndarray::s![s, a, ..]).assign(&row);
            model_p
                .slice_mut(ndarray::s![s, a, ..])
                .assign(&(&row * (1.0 - mix) + &noise * mix));
        }
    }
    let r = Array2::from_shape_fn((n_s, n_a), |_| g.random::<f64>());
    let ood = OodSet {
        mask: Array2::from_shape_fn((n_s, n_a), |_| g.random::<f64>() < 0.25),
    };
    let rho0 = simplex(&mut g, n_s);
    let mdp = TabularMdp::new(p, r, gamma, rho0)?;
    let v_max = mdp.v_max();
    let u = Array2::from_shape_fn((n_s, n_a), |(s, a)| {
        let tv: f64 = (0..n_s).map(|k| (model_p[[s, a, k]] - mdp.p[[s, a, k]]).abs()).sum::<f64>() * 0.5;
        gamma * tv * v_max
    });
    Ok(BoundInstance {
        mdp,
        model_p,
        ood,
        u,
        beta: 1.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub report: BoundReport,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "seed,lhs,consistency_term,truncation_term,assumption_ok,holds"
    }

    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:e},{:e},{:e},{},{}",
            self.seed, r.lhs, r.consistency_term, r.truncation_term, r.assumption_ok, r.holds
        )
    }
}

/// Runs `verify_bound` on `n` random 5-state / 3-action instances seeded `seed..seed + n`.
pub fn bound_sweep(n: usize, seed: u64, gamma: f64) -> Result<Vec<SweepRow>> {
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let inst = random_instance(seed + k, 5, 3, gamma)?;
            let report = verify_bound(
                &inst.mdp,
                &inst.model_p,
                &inst.ood,
                &inst.u,
                inst.beta,
                default_horizon(gamma),
            )?;
            Ok(SweepRow { seed: seed + k, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(seed: u64) -> BoundInstance {
        random_instance(seed, 5, 3, 0.9).unwrap()
    }

    fn sup(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Loop-based Bellman backup written independently of the operator code.
    fn vi_step(mdp: &TabularMdp, q: &Array2<f64>) -> Array2<f64> {
        let (n_s, n_a) = (mdp.n_s(), mdp.n_a());
        let mut out = Array2::zeros((n_s, n_a));
        for s in 0..n_s {
            for a in 0..n_a {
                let mut ev = 0.0;
                for s2 in 0..n_s {
                    let mut best = f64::NEG_INFINITY;
                    for a2 in 0..n_a {
                        best = best.max(q[[s2, a2]]);
                    }
                    ev += mdp.p[[s, a, s2]] * best;
                }
                out[[s, a]] = mdp.r[[s, a]] + mdp.gamma * ev;
            }
        }
        out
    }

    fn random_q(seed: u64) -> Array2<f64> {
        let mut g = rng::stream(seed);
        Array2::from_shape_fn((5, 3), |_| 10.0 * (g.random::<f64>() - 0.5))
    }

    #[test]
    fn validation_errors() {
        let i = inst(0);
        let mut bad = i.mdp.p.clone();
        bad[[1, 2, 0]] += 0.1;
        assert_eq!(
            TabularMdp::new(bad.clone(), i.mdp.r.clone(), 0.9, i.mdp.rho0.clone()).unwrap_err(),
            PessimismError::NotStochastic { what: "P", s: 1, a: 2 }
        );
        let q = Array2::zeros((5, 3));
        assert!(matches!(
            hybrid_bellman(&i.mdp, &bad, &i.ood, &q, Backup::Greedy),
            Err(PessimismError::NotStochastic { what: "model_P", .. })
        ));
        assert!(TabularMdp::new(i.mdp.p.clone(), i.mdp.r.clone(), 1.0, i.mdp.rho0.clone()).is_err());
    }

    #[test]
    fn hybrid_operator_cases() {
        let i = inst(1);
        let q = random_q(1);
        let all = hybrid_bellman(&i.mdp, &i.model_p, &OodSet::all(5, 3), &q, Backup::Greedy).unwrap();
        assert_eq!(all, i.mdp.r);
        let none = hybrid_bellman(&i.mdp, &i.mdp.p, &OodSet::empty(5, 3), &q, Backup::Greedy).unwrap();
        assert!(sup(&none, &vi_step(&i.mdp, &q)) < 1e-12);
        for k in 0..20 {
            let (q1, q2) = (random_q(100 + k), random_q(200 + k));
            let t1 = hybrid_bellman(&i.mdp, &i.model_p, &i.ood, &q1, Backup::Greedy).unwrap();
            let t2 = hybrid_bellman(&i.mdp, &i.model_p, &i.ood, &q2, Backup::Greedy).unwrap();
            assert!(sup(&t1, &t2) <= i.mdp.gamma * sup(&q1, &q2) + 1e-12);
        }
    }

    #[test]
    fn pessimistic_mdp_matches_hybrid_fixed_point() {
        for seed in 0..10 {
            let i = inst(seed);
            let hyb = fixed_point((5, 3), |q| {
                hybrid_bellman(&i.mdp, &i.model_p, &i.ood, q, Backup::Greedy).unwrap()
            })
            .unwrap();
            let aug = build_pessimistic_mdp(&i.mdp, &i.model_p, &i.ood).unwrap();
            let q_aug = value_iteration(&aug).unwrap();
            assert_eq!(aug.n_s(), 6);
            assert!(q_aug.row(5).iter().all(|&v| v == 0.0));
            assert!(sup(&hyb, &q_aug.slice(ndarray::s![..5, ..]).to_owned()) < 1e-9);
        }
    }

    #[test]
    fn pessimistic_mdp_edge_cases() {
        let i = inst(3);
        let model = TabularMdp::new(i.model_p.clone(), i.mdp.r.clone(), 0.9, i.mdp.rho0.clone()).unwrap();
        let q_model = value_iteration(&model).unwrap();
        let aug = build_pessimistic_mdp(&i.mdp, &i.model_p, &OodSet::empty(5, 3)).unwrap();
        let q_aug = value_iteration(&aug).unwrap();
        assert!(sup(&q_model, &q_aug.slice(ndarray::s![..5, ..]).to_owned()) < 1e-9);

        let aug = build_pessimistic_mdp(&i.mdp, &i.model_p, &OodSet::all(5, 3)).unwrap();
        let q_aug = value_iteration(&aug).unwrap();
        for s in 0..5 {
            let v = q_aug.row(s).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let best_r = i.mdp.r.row(s).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            assert!((v - best_r).abs() < 1e-12);
        }
    }

    #[test]
    fn penalized_operator_properties() {
        let i = inst(4);
        let q = random_q(4);
        let a = penalized_operator(&i.mdp, &i.model_p, &i.ood, &i.u, 0.0, &q, Backup::Greedy).unwrap();
        let b = hybrid_bellman(&i.mdp, &i.model_p, &i.ood, &q, Backup::Greedy).unwrap();
        assert_eq!(a, b);
        let fp = |beta: f64| {
            fixed_point((5, 3), |q| {
                penalized_operator(&i.mdp, &i.model_p, &i.ood, &i.u, beta, q, Backup::Greedy).unwrap()
            })
            .unwrap()
        };
        let (lo, hi) = (fp(0.5), fp(2.0));
        assert!(hi.iter().zip(lo.iter()).all(|(h, l)| h <= &(l + 1e-12)));
        assert!(penalized_operator(&i.mdp, &i.model_p, &i.ood, &i.u, -1.0, &q, Backup::Greedy).is_err());
    }

    #[test]
    fn penalized_fixed_point_is_pessimistic_on_manifold() {
        let mut checked = 0;
        for seed in 0..20 {
            let i = inst(seed);
            let pi = greedy_policy(&random_q(seed));
            let q_hat = fixed_point((5, 3), |q| {
                penalized_operator(&i.mdp, &i.model_p, &i.ood, &i.u, 1.0, q, Backup::Policy(&pi)).unwrap()
            })
            .unwrap();
            if error_ratio(&i.mdp, &i.model_p, &i.ood, &i.u, &state_values(&q_hat, &pi)) > 1.0 {
                continue;
            }
            checked += 1;
            let q_true = policy_value(&i.mdp, &pi).unwrap();
            for ((s, a), v) in q_hat.indexed_iter() {
                if !i.ood.contains(s, a) {
                    assert!(*v <= q_true[[s, a]] + 1e-9, "seed {seed} ({s},{a})");
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn truncation_gap_within_hitting_bound() {
        for seed in 0..20 {
            let i = inst(seed);
            let mut g = rng::stream(seed);
            let pi = Array2::from_shape_fn((5, 3), |_| g.random::<f64>());
            let pi = &pi / &pi.sum_axis(Axis(1)).insert_axis(Axis(1));
            let (gap, bound) = truncation_gap(&i.mdp, &i.ood, &pi).unwrap();
            for s in 0..5 {
                assert!(gap[s] >= -1e-9 && gap[s] <= bound[s] + 1e-9, "seed {seed}: {gap} vs {bound}");
            }
        }
    }

    #[test]
    fn hitting_probability_cases() {
        let i = inst(5);
        let pi = greedy_policy(&random_q(5));
        let h = hitting_probability(&i.mdp, &OodSet::all(5, 3), &pi, Some(0));
        assert!(h.iter().all(|&x| x == 1.0));
        let h = hitting_probability(&i.mdp, &OodSet::empty(5, 3), &pi, None);
        assert!(h.iter().all(|&x| x == 0.0));
        let short = hitting_probability(&i.mdp, &i.ood, &pi, Some(2));
        let long = hitting_probability(&i.mdp, &i.ood, &pi, Some(50));
        assert!(short.iter().zip(long.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn bound_trivial_regimes() {
        let i = inst(6);
        let zero = Array2::zeros((5, 3));
        let h = default_horizon(0.9);
        let perfect = verify_bound(&i.mdp, &i.mdp.p, &OodSet::empty(5, 3), &zero, 1.0, h).unwrap();
        assert!(perfect.lhs.abs() < 1e-9);
        assert_eq!(perfect.rhs(), 0.0);
        assert!(perfect.holds && perfect.assumption_ok);

        let all = verify_bound(&i.mdp, &i.model_p, &OodSet::all(5, 3), &i.u, 1.0, h).unwrap();
        assert!((all.truncation_term - 2.0 * all.v_max).abs() < 1e-12);
        assert!(all.holds);
    }

    #[test]
    fn bound_holds_where_assumption_does() {
        let rows = bound_sweep(40, 1000, 0.9).unwrap();
        let ok: Vec<_> = rows.iter().filter(|r| r.report.assumption_ok).collect();
        assert!(ok.len() > 20, "only {} instances satisfy the assumption", ok.len());
        assert!(ok.iter().all(|r| r.report.holds));
        assert!(rows.iter().all(|r| r.report.beta_min.is_finite() && r.report.beta_min >= 0.0));
        assert_eq!(rows[3].csv_line().split(',').count(), 6);
    }

    #[test]
    fn default_horizon_reaches_tolerance() {
        let h = default_horizon(0.9);
        assert!(0.9f64.powi(h as i32) <= 1e-15 && 0.9f64.powi(h as i32 - 1) > 1e-15);
    }
}
