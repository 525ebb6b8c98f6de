//! Natural policy gradient methods for tabular MDPs.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod npg;
pub mod oracle;

pub use error::{Error, Result};
pub use geometry::{bregman_divergence, BregmanValue, CustomPotential, Potential};
pub use mdp::{kakade_two_state, Mdp, Policy, StateActionFrequency};
pub use npg::{GeometrySpec, Objective, SoftmaxParams};
