//! Rectified-flow action policies for imitation learning.
//!
//! The pipeline trains a base velocity field by flow matching on expert
//! demonstrations, distills it with reflow on self-generated couplings, and
//! then aligns those couplings with nearby expert actions before a final
//! training round, so that single-step Euler sampling stays consistent with
//! the observation.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod envs;
pub mod flow_train;
pub mod solvers;
pub mod velocity_net;
pub mod eval;
pub mod io;
pub mod reflow;
pub mod sefa;
pub mod pipeline;
