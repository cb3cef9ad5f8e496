//! Shared domain types: system topology, configuration states, seeded
//! random streams, and the geometry helpers everything else builds on.

mod geometry;
mod rng;
mod state;
mod system;

pub use geometry::{apply_rigid_motion, center_of_geometry, random_rotation};

/// Log-density of a standard normal evaluated at every entry of `arr`,
/// summed (includes the full normalizing constant).
pub fn log_standard_normal(arr: &ndarray::Array2<f64>) -> f64 {
    let sumsq: f64 = arr.iter().map(|v| v * v).sum();
    let n = arr.len() as f64;
    -0.5 * sumsq - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}
pub use rng::RngStream;
pub use state::{apply_permutation, Permutation, State};
pub use system::{
    bead_chain_family, AngleTerm, BondTerm, DihedralTerm, FamilyConfig, SystemSpec,
    MAX_ATOM_TYPES, SPEC_FORMAT_VERSION,
};

use thiserror::Error;

/// Errors raised by the domain types in this module.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("empty position array")]
    EmptyPositions,
    #[error("permutation of length {len} is not a bijection on 0..{len}")]
    NotAPermutation { len: usize },
    #[error("permutation length {perm} does not match atom count {atoms}")]
    PermutationLength { perm: usize, atoms: usize },
    #[error("matrix is not a rotation: {reason}")]
    NotARotation { reason: String },
    #[error("system `{system}`: {reason}")]
    InvalidSystem { system: String, reason: String },
    #[error("state shape {rows}x{cols} does not match system ({atoms} atoms, dimension {dim})")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        atoms: usize,
        dim: usize,
    },
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
    #[error("failed to read system spec: {0}")]
    SpecRead(String),
}
