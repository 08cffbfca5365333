//! Smooth image animation from a learned stationary velocity field.
//!
//! Integrating the field's flow equation from the identity map yields a
//! time-indexed family of invertible warps: evaluating at t = 1 transports
//! a start frame onto an end frame, fractional t gives the in-between
//! frames, and negative t plays the motion backwards. Training fits the
//! field either to paired frames (L2) or to an unpaired set via a
//! Wasserstein critic with gradient penalty.
//!
//! Everything runs on a self-contained f64 autodiff tape (`tensor`), with
//! image I/O, synthetic tasks, training loops and GIF export in the
//! sibling modules.

pub mod checkpoint;
pub mod data;
pub mod gif;
pub mod nn;
pub mod ode;
pub mod tensor;
pub mod train;
pub mod warp;

pub use tensor::{grad_check, Tape, Tensor, Var};
