//! Training engine for Fenchel lifted networks.
//!
//! Activations are rewritten as biconvex divergence penalties, which turns
//! network training into a problem over weights *and* per-layer activations
//! that block-coordinate descent can attack one convex block at a time.

pub mod baseline;
pub mod bcd;
pub mod checkpoint;
pub mod data;
pub mod divergence;
pub mod error;
pub mod network;
pub mod solvers;
pub mod verify;

pub use divergence::ActivationKind;
pub use error::{Error, Result};
pub use network::{Hyperparams, LiftedState, LossKind, NetworkSpec, Weights};
