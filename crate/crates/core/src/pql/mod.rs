//! Clustered design data and exact evaluation of the PQL objective,
//! its gradient, and the block partition of its negative Hessian.
//!
//! Parameters are always ordered `(beta, b_1, ..., b_m)`.

mod design;
mod objective;

pub use design::{ClusterData, ClusteredDesign, ThetaState, WorkingParams};
pub use objective::{
    pql_gradient, pql_hessian_blocks, pql_objective, unpenalized_score, HessianBlocks,
};
pub(crate) use objective::{cluster_eta, kernel_objective};
