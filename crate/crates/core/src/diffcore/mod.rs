//! Minimal reverse-mode differentiation substrate: an append-only tape
//! of dense `f64` matrices, a named parameter store with Adam, and
//! hash-verified checkpoint files. No external ML framework.

mod checkpoint;
mod params;
mod tape;

pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use params::{AdamConfig, ParamError, ParamStore};
pub use tape::{Gradients, NodeId, Tape, TapeError};
