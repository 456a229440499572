//! Per-column z-scoring.

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Column-wise `(x - mean) / std`. Constant columns get unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn fit(x: ArrayView2<f64>) -> Self {
        if x.nrows() == 0 {
            return Self::identity(x.ncols());
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }

    pub fn invert(&self, x: ArrayView2<f64>) -> Array2<f64> {
        &x * &self.std + &self.mean
    }

    /// Maps a gradient w.r.t. normalized inputs to one w.r.t. raw inputs.
    pub fn pullback(&self, g: ArrayView2<f64>) -> Array2<f64> {
        &g / &self.std
    }

    /// Concatenates `[mean, std]` for storage.
    pub fn to_flat(&self) -> Vec<f64> {
        self.mean.iter().chain(self.std.iter()).copied().collect()
    }

    pub fn from_flat(v: &[f64]) -> Option<Self> {
        if !v.len().is_multiple_of(2) {
            return None;
        }
        let d = v.len() / 2;
        Some(Self {
            mean: Array1::from(v[..d].to_vec()),
            std: Array1::from(v[d..].to_vec()),
        })
    }
}
