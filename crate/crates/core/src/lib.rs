//! Tabular solvers for regularized MDPs: regularizer triples on the action
//! simplex, regularized Bellman operators, the reg-MPI and mirror-descent MPI
//! schemes with error injection, and empirical bound checkers.

pub mod analysis;
pub mod bellman;
pub mod error;
pub mod experiment;
pub mod extensions;
mod linalg;
pub mod mdp;
pub mod regularizer;
pub mod schemes;

pub use error::{Error, Result};
