//! Spherical latent-variable energy-based models guided by a contrastive
//! latent encoder.
//!
//! The crate trains a joint model of data and unit-sphere latent variables:
//! a feature network whose output norm carries the (marginal) energy and
//! whose direction, through a small projector, predicts the latent produced
//! by a separately trained contrastive encoder. Sampling runs stochastic
//! gradient Langevin dynamics on the energy with a persistent replay buffer.
//! On top of the trained pair the crate provides out-of-distribution scoring,
//! instance/class-conditional sampling, and multi-concept compositional
//! sampling, plus the two-sample and ranking metrics used to evaluate them.
//!
//! Module map:
//! - [`nn`]: dense/conv layers with exact hand-derived gradients and
//!   spectral normalization (plumbing under the models).
//! - [`energy`]: the energy model (joint/marginal/compositional energies,
//!   OOD score, input gradients for SGLD).
//! - [`encoder`]: the contrastive latent encoder and latent sampling.
//! - [`augment`]: augmentation policies for vectors and rasters.
//! - [`sgld`]: Langevin sampler and replay buffer.
//! - [`objectives`]: contrastive and EBM training losses with the
//!   stop-gradient contract.
//! - [`optim`]: Adam and SGD-with-momentum.
//! - [`data`]: synthetic 2D datasets, image loading, OOD counterparts.
//! - [`trainer`]: the joint training loop (warmup, EMA, checkpoints,
//!   metrics, bit-exact resume).
//! - [`evaluation`]: MMD, AUROC, conditional/compositional sampling,
//!   cosine-similarity histograms, norm-flexibility check.
//! - [`checkpoint`]: named-array container and checkpoint directories.
//! - [`config`]: flat `key = value` run configuration.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod num;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sgld;
pub mod trainer;

pub use error::{Error, Result};
pub use num::Real;
