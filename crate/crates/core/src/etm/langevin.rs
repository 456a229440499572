use ndarray::{Array1, Array2, ArrayView2, Zip};

use super::{EtmError, Result};
use crate::rng::{self, Stream};

/// Two-stage inference schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub steps_latent: usize,
    pub steps_ambient: usize,
    pub step_latent: f64,
    pub step_ambient: f64,
    pub noise_scale: f64,
    pub delta_clip: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            steps_latent: 30,
            steps_ambient: 20,
            step_latent: 1e-3,
            step_ambient: 1e-3,
            noise_scale: 0.5,
            delta_clip: 0.5,
        }
    }
}

impl LangevinConfig {
    pub fn latent(&self) -> ChainParams {
        ChainParams {
            steps: self.steps_latent,
            step_size: self.step_latent,
            noise_scale: self.noise_scale,
            delta_clip: self.delta_clip,
        }
    }

    pub fn ambient(&self) -> ChainParams {
        ChainParams {
            steps: self.steps_ambient,
            step_size: self.step_ambient,
            noise_scale: self.noise_scale,
            delta_clip: self.delta_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.latent().validate()?;
        self.ambient().validate()
    }
}

/// One chain stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainParams {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub delta_clip: f64,
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.noise_scale >= 0.0) || !(self.delta_clip > 0.0) {
            return Err(EtmError::Config(format!("invalid Langevin parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    pub x: Array2<f64>,
    /// Energy at the final point of every chain.
    pub energy: Array1<f64>,
    /// Energies before each step, then the final energies.
    pub trace: Vec<Array1<f64>>,
}

/// Runs one Langevin chain per row of `x0`:
/// `x <- x + clip(-eps * grad + noise_scale * sqrt(2 eps) * w, delta_clip)`.
///
/// `field` returns row-wise energies and gradients for a batch of points.
pub fn langevin<F>(mut field: F, x0: Array2<f64>, p: &ChainParams, rng: &mut Stream, trace: bool) -> Result<ChainRun>
where
    F: FnMut(ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>,
{
    p.validate()?;
    let mut x = x0;
    let mut energies = Vec::new();
    let amp = p.noise_scale * (2.0 * p.step_size).sqrt();
    for step in 0..=p.steps {
        let (e, g) = field(x.view())?;
        if e.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(EtmError::NonFinite { step });
        }
        if step == p.steps {
            if trace {
                energies.push(e.clone());
            }
            return Ok(ChainRun {
                x,
                energy: e,
                trace: energies,
            });
        }
        if trace {
            energies.push(e);
        }
        let clip = p.delta_clip;
        if p.noise_scale > 0.0 {
            Zip::from(&mut x).and(&g).for_each(|xv, &gv| {
                let d = -p.step_size * gv + amp * rng::normal(rng);
                *xv += d.clamp(-clip, clip);
            });
        } else {
            Zip::from(&mut x).and(&g).for_each(|xv, &gv| {
                *xv += (-p.step_size * gv).clamp(-clip, clip);
            });
        }
    }
    unreachable!()
}
