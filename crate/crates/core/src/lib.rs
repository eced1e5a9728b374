//! H∞ feedback synthesis and verification for parabolic systems with an
//! inverse-square (Hardy) potential and convection, posed on a ball and
//! reduced to radially symmetric data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod experiment;
pub mod hardy;
pub mod hinf;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod operators;
pub mod riccati;
pub mod semigroup;

pub use error::{Error, Result};
