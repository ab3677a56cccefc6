//! Intervals for fixed effects, random effects, prediction gaps and linear
//! predictors under the conditional and unconditional regimes.
//!
//! Conditional-regime intervals target the sum-to-zero reparametrised
//! truth: the fitted random effects always sum to zero under partnering,
//! so `beta_hat` estimates `beta + mean(b)` and `b_hat_i` estimates
//! `b_i - mean(b)`. Callers comparing against simulated truth must shift
//! it accordingly.
//!
//! All limiting covariance matrices are replaced by plug-ins evaluated at
//! a supplied parameter point (the fit by default).

mod intervals;
mod mixn;
mod types;

pub use intervals::{
    conditional_interval, conditional_interval_at, gap_mixture_spec, linear_predictor_interval, linear_predictor_interval_at,
    plug_in_k, plug_in_k_at, prediction_gap_interval, prediction_gap_interval_at, predictor_distribution_check,
    unconditional_fixed_interval, PredictorSummary,
};
pub use mixn::{mixn_quantiles, CondCovFn, quantile_sorted, quantile_standard_error, MixNSpec};
pub use types::{normal_quantile, Basis, InferenceSettings, IntervalResult, Regime, TargetKind, TargetSelection};
