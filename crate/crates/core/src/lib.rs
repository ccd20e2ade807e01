//! A numerical laboratory for random walks in balanced i.i.d. random
//! environments on `Z^d` and the homogenization of the associated
//! non-divergence form difference operators.

pub mod environment;
pub mod error;
pub mod harness;
pub mod homogenize;
pub mod lattice;
pub mod operator;
pub mod solver;
pub mod walk;

pub use error::{Error, Result};
