//! Modelling, planning and control for a planar three-link brachiation robot.
//!
//! The robot is a bar-hanging chain: holding arm, body, swing arm. One
//! swing cycle is planned with iLQR ([`trajopt`]), tracked with a hybrid
//! joint-space/task-space controller ([`tracking`]) and executed on an RK4
//! plant ([`simulator`]). [`designlab`] runs the body-length and mass
//! distribution studies on top of the optimizer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod configspace;
pub mod designlab;
pub mod dynamics;
pub mod error;
pub mod simulator;
pub mod tracking;
pub mod trajopt;

pub use error::{Error, Result};
