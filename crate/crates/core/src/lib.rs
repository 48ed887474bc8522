#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Chaotic-dynamics mobility toolkit.
//!
//! Integrates chaotic ODE systems, cuts them with multi-component Poincaré
//! sections, builds full and partial first-return maps on the concatenated
//! variable ρ, and turns the resulting symbolic dynamics into mobility traces.

pub mod dynsys;
pub mod error;
pub mod metrics;
pub mod mobility;
pub mod returnmap;
pub mod section;

pub use error::{Error, Result};
