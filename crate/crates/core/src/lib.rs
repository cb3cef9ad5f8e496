//! Large-timestep proposal kernels for Boltzmann sampling.
//!
//! This crate trains a conditional normalising flow to approximate the
//! distribution of a Langevin trajectory a long lag after a given
//! configuration, then uses that flow either as a proposal inside a
//! Metropolis-Hastings chain (asymptotically unbiased) or as a fast,
//! biased explorer of metastable states. Everything runs on small
//! surrogate systems (a 1-D double well, the Mueller-Brown surface, and
//! bead chains with bonded terms) so that quadrature and brute-force
//! oracles stay tractable.
//!
//! Module map:
//! - [`core`]: shared domain types (system topology, states, seeded rng)
//!   and geometry helpers.
//! - [`energy`]: potential energies, analytic forces, and the augmented
//!   target density sampled by the chain.
//! - [`dynamics`]: BAOAB Langevin integration, trajectory storage, and
//!   conditional ensembles used as ground-truth oracles.
//! - [`dataset`]: pair extraction, auxiliary draws, canonicalisation,
//!   rotation augmentation, and train/test split management.
//! - [`diffcore`]: a minimal reverse-mode differentiation tape plus the
//!   Adam optimizer and checkpoint files.
//! - [`flow`]: the conditional coupling flow with kernel self-attention.
//! - [`training`]: likelihood / acceptance / entropy objectives and the
//!   two-stage training loop.
//! - [`sampler`]: batched MH sampling, Gibbs auxiliary refresh, the
//!   exploration sampler, and constraint hooks.
//! - [`analysis`]: TICA, autocorrelation, effective sample size,
//!   free-energy profiles, conditional comparisons, and validation of
//!   newly discovered states.

pub mod analysis;
pub mod core;
pub mod dataset;
pub mod diffcore;
pub mod dynamics;
pub mod energy;
pub mod flow;
pub mod sampler;
pub mod training;
