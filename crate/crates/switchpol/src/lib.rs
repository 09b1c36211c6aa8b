//! Learning stochastic switching control policies from state-only
//! trajectories.
//!
//! The pipeline has two stages: first the known vehicle dynamics are inverted
//! to point-estimate the control inputs that produced an observed state
//! sequence; then a mixture-of-experts switching policy is fitted to the
//! estimated inputs by majorization-minimization, optionally subject to a
//! common-Lyapunov stability constraint on the input recursion. Multi-step
//! prediction quality is evaluated with recursive one-step and joint
//! input-state protocols against a constant-control baseline.

pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod inference;
pub mod learning;
pub mod math;
pub mod model;
pub mod stability;
pub mod track;
pub mod trajectory;

pub use error::{Error, Result};
