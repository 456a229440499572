//! Manifold-constrained energy-based transition models for offline
//! model-based reinforcement learning.
//!
//! Modules, bottom-up:
//! - [`ndgrad`]: reverse-mode differentiation, MLPs, Adam
//! - [`envdata`]: didactic and CliffChain environments, embeddings, datasets
//! - [`manifold`]: next-state autoencoder
//! - [`etm`]: conditional energy models, manifold projection-diffusion
//!   negatives, InfoNCE training, Langevin inference
//! - [`pessimism`]: energy-gated truncation, dispersion-penalized targets,
//!   tabular hybrid operators and the performance-bound verifier
//! - [`policy`]: offline actor-critic on truncated model rollouts
//! - [`cli`]: command-line pipelines, reports and plots

pub mod checkpoint;
pub mod cli;
pub mod envdata;
pub mod etm;
pub mod manifold;
pub mod ndgrad;
pub mod norm;
pub mod pessimism;
pub mod policy;
pub mod rng;
