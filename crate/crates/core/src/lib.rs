//! Penalized quasi-likelihood estimation and inference for generalized
//! linear mixed models with independent clusters.
//!
//! The fitting core maximises the PQL objective jointly over fixed and
//! random effects with a blockwise Newton method (the random-effect
//! blocks are eliminated through a Schur complement, so the cost is linear
//! in the number of clusters). On top of that sit interval builders for
//! the conditional and unconditional regimes, a simulation harness and a
//! command-line front end.

pub mod cli;
pub mod error;
pub mod family;
pub mod inference;
pub mod linalg;
pub mod pql;
pub mod rng;
pub mod sim;
pub mod solver;

pub use error::{PqlError, Result};
pub use family::Family;
pub use pql::{ClusterData, ClusteredDesign, ThetaState, WorkingParams};
pub use solver::{fit_pql, PqlFit, SolverConfig};
