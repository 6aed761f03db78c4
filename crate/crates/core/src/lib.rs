//! Wind-farm wake model and model-predictive power tracking.

// Validation uses `!(x <= limit)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approximation;
pub mod closed_loop;
pub mod error;
pub mod optimizer;
pub mod rotor_power;
pub mod scenario;
pub mod transport;
pub mod wake_model;

pub use error::{Error, Result};
