//! Block-structured Newton maximisation of the PQL objective, the outer
//! working-covariance update, and dispersion estimation.
//!
//! A Newton step never forms the dense Hessian: each cluster contributes a
//! `p_r x p_r` cap `(Z_i' W_i Z_i + G^-1)^-1` and the fixed effects are
//! solved through the `p_f x p_f` Schur complement, so a step costs
//! `O(sum_i n_i p^2 + m p^3)`.

mod config;
mod newton;
mod outer;
mod schur;

pub use config::{GUpdateMode, SolverConfig};
pub use newton::{fit_inner, newton_direction, newton_step, NewtonStep};
pub use outer::{estimate_dispersion, estimate_dispersion_with, fit_pql, sample_covariance, PqlFit};
pub use schur::{schur_complement, schur_complement_partnered_alt, SchurComplement};
