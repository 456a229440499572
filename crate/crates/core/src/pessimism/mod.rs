//! Energy-gated truncation and dispersion-penalized Bellman targets, plus
//! exact tabular counterparts used to check the pessimism guarantees.

mod tabular;

pub use tabular::{
    bound_sweep, build_pessimistic_mdp, fixed_point, greedy_policy, hitting_probability, hybrid_bellman,
    default_horizon, penalized_operator, policy_value, random_instance, truncation_gap, value_iteration, verify_bound, Backup,
    BoundInstance, BoundReport, OodSet, SweepRow, TabularMdp,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PessimismError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("row ({s}, {a}) of {what} is not a probability distribution")]
    NotStochastic { what: &'static str, s: usize, a: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, PessimismError>;

/// Where the zero floor of the target applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    Off,
    /// Floor the ensemble mean of the bootstrap values at zero.
    BootstrapMean,
    /// Floor the complete target at zero.
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PessimismConfig {
    pub delta: f64,
    pub lambda: f64,
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub clip: ClipMode,
}

impl Default for PessimismConfig {
    fn default() -> Self {
        Self {
            delta: f64::INFINITY,
            lambda: 0.5,
            m: 5,
            n: 10,
            gamma: 0.99,
            clip: ClipMode::BootstrapMean,
        }
    }
}

impl PessimismConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(PessimismError::Config("M and N must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PessimismError::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) || self.delta.is_nan() {
            return Err(PessimismError::Config("lambda must be >= 0 and delta a number".into()));
        }
        Ok(())
    }
}

/// `1` iff `energy > delta`.
pub fn virtual_terminal(energy: f64, delta: f64) -> bool {
    energy > delta
}

/// `(1/N) sum_j (1 - nu_j) q_j`; truncated samples contribute zero.
pub fn q_bar(q_values: &[f64], nu: &[bool]) -> f64 {
    debug_assert_eq!(q_values.len(), nu.len());
    if q_values.is_empty() {
        return 0.0;
    }
    let sum: f64 = q_values.iter().zip(nu).filter(|(_, &t)| !t).map(|(q, _)| q).sum();
    sum / q_values.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population standard deviation of the per-member bootstrap values.
pub fn uncertainty_u(q_bars: &[f64]) -> f64 {
    if q_bars.is_empty() {
        return 0.0;
    }
    mean_std(q_bars).1
}

/// `r - lambda * std(q_bar) + gamma * mean(q_bar)` with the configured clip.
pub fn penalized_target(r: f64, q_bars: &[f64], cfg: &PessimismConfig) -> f64 {
    let (mean, std) = mean_std(q_bars);
    let mean = match cfg.clip {
        ClipMode::BootstrapMean => mean.max(0.0),
        _ => mean,
    };
    let target = r - cfg.lambda * std + cfg.gamma * mean;
    match cfg.clip {
        ClipMode::Target => target.max(0.0),
        _ => target,
    }
}
