//! Two-time-scale control of an interior permanent magnet generator feeding a
//! dc bus through an active rectifier.
//!
//! * [`machine`]: parameters, dq0 transforms and the averaged plant.
//! * [`current_loop`]: decoupled output-regulation current controllers (fast loop).
//! * [`steady_state`]: minimum-current operating point and its brute-force oracle.
//! * [`nmpc`]: reduced dc-voltage model and the predictive voltage controller (slow loop).
//! * [`sim`]: closed-loop simulation, sine PWM and run metrics.
//! * [`config`]: scenario files and the built-in reference cases.
//! * [`verify`]: the acceptance checks shared by the test suite and the CLI.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod current_loop;
pub mod error;
pub mod machine;
pub mod nmpc;
pub mod sim;
pub mod steady_state;
pub mod verify;

pub use error::{Error, Result};
