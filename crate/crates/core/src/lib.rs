//! Stochastic diffusion with dynamical boundary conditions: P1 finite
//! elements, implicit time stepping, discrete adjoints and a projected
//! gradient method for boundary control.

// `!(x > 0.0)` guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod banded;
pub mod coefficients;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod mesh;
pub mod noise;
pub mod operator;
pub mod optimize;
pub mod problem;
pub mod smp;

pub use error::{Error, Result};
