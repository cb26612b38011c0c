//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything learnable in the crate flows through a [`Tape`]: the forward
//! pass records one [`Tensor`] per operation, `backward` replays the record
//! in reverse to fill gradients. Tapes are rebuilt from scratch for every
//! document forward pass; long-lived parameters live in a [`ParamStore`] and
//! are re-registered on each fresh tape.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Tensor, Var, PROB_FLOOR};
