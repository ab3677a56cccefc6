//! C ABI for fitting and interval construction.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a `PQL_*` status
//! code and records a message retrievable with `pql_last_error_message` on
//! the same thread. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use pqlmm::inference::{
    conditional_interval, prediction_gap_interval, unconditional_fixed_interval, InferenceSettings, IntervalResult,
    Regime, TargetSelection,
};
use pqlmm::solver::{GUpdateMode, SolverConfig};
use pqlmm::{fit_pql, ClusterData, ClusteredDesign, Family, PqlError, PqlFit};

pub const PQL_OK: i32 = 0;
pub const PQL_ERR_NULL_POINTER: i32 = 1;
pub const PQL_ERR_INVALID_ARGUMENT: i32 = 2;
pub const PQL_ERR_DIMENSION: i32 = 3;
pub const PQL_ERR_DOMAIN: i32 = 4;
pub const PQL_ERR_INVALID_DESIGN: i32 = 5;
pub const PQL_ERR_NUMERICAL: i32 = 6;
pub const PQL_ERR_UNSUPPORTED: i32 = 7;
/// The fit finished without meeting its convergence tolerances. The handle
/// is still returned.
pub const PQL_ERR_NOT_CONVERGED: i32 = 8;
pub const PQL_ERR_PANIC: i32 = 99;

pub const PQL_FAMILY_GAUSSIAN: i32 = 0;
pub const PQL_FAMILY_POISSON: i32 = 1;
pub const PQL_FAMILY_BERNOULLI: i32 = 2;
pub const PQL_FAMILY_BINOMIAL: i32 = 3;

pub const PQL_G_SAMPLE_COV: i32 = 0;
pub const PQL_G_FIXED: i32 = 1;

pub const PQL_REGIME_AUTO: i32 = 0;
pub const PQL_REGIME_MANY_CLUSTERS: i32 = 1;
pub const PQL_REGIME_BALANCED: i32 = 2;
pub const PQL_REGIME_LARGE_CLUSTERS: i32 = 3;

/// Interval for one scalar target.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PqlInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Design under construction.
pub struct PqlDesign {
    p_f: usize,
    p_r: usize,
    partnered: bool,
    clusters: Vec<ClusterData>,
}

/// A fitted model together with the design it was fitted to.
pub struct PqlModel {
    design: ClusteredDesign,
    fit: PqlFit,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(err: &PqlError) -> i32 {
    match err {
        PqlError::Domain(_) => PQL_ERR_DOMAIN,
        PqlError::Dimension(_) => PQL_ERR_DIMENSION,
        PqlError::InvalidDesign(_) => PQL_ERR_INVALID_DESIGN,
        PqlError::SingularWorkingCovariance { .. } | PqlError::SingularClusterBlock { .. } | PqlError::Numerical(_) => {
            PQL_ERR_NUMERICAL
        }
        PqlError::Unsupported(_) => PQL_ERR_UNSUPPORTED,
        PqlError::InvalidArgument(_) | PqlError::Parse(_) | PqlError::Io(_) => PQL_ERR_INVALID_ARGUMENT,
    }
}

struct Fail(i32, String);

impl From<PqlError> for Fail {
    fn from(e: PqlError) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn fail<T>(code: i32, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(code, msg.into()))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<i32, Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => {
            if code == PQL_OK {
                set_error("");
            }
            code
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PQL_ERR_PANIC
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(PQL_ERR_NULL_POINTER, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(PQL_ERR_NULL_POINTER, format!("{name} is null")))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize) -> Result<i32, Fail> {
    if len != values.len() {
        return fail(PQL_ERR_DIMENSION, format!("output buffer has length {len}, expected {}", values.len()));
    }
    if out.is_null() && len > 0 {
        return fail(PQL_ERR_NULL_POINTER, "output buffer is null");
    }
    if len > 0 {
        ptr::copy_nonoverlapping(values.as_ptr(), out, len);
    }
    Ok(PQL_OK)
}

fn family_of(code: i32) -> Result<Family, Fail> {
    match code {
        PQL_FAMILY_GAUSSIAN => Ok(Family::Gaussian),
        PQL_FAMILY_POISSON => Ok(Family::Poisson),
        PQL_FAMILY_BERNOULLI => Ok(Family::Bernoulli),
        PQL_FAMILY_BINOMIAL => Ok(Family::Binomial),
        _ => fail(PQL_ERR_INVALID_ARGUMENT, format!("unknown family code {code}")),
    }
}

fn interval_out(r: &IntervalResult, out: *mut PqlInterval) -> Result<i32, Fail> {
    if out.is_null() {
        return fail(PQL_ERR_NULL_POINTER, "output interval is null");
    }
    // SAFETY: checked non-null; the caller provides a writable PqlInterval.
    unsafe { *out = PqlInterval { estimate: r.estimate, lower: r.lower, upper: r.upper, level: r.level } };
    Ok(PQL_OK)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn pql_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Starts a design with `p_f` fixed and `p_r` random covariates. When
/// `partnered` is nonzero the random covariates are the fixed ones and
/// `p_r` must equal `p_f`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn pql_design_new(p_f: usize, p_r: usize, partnered: i32, out: *mut *mut PqlDesign) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(PQL_ERR_NULL_POINTER, "out is null");
        }
        if p_r == 0 {
            return fail(PQL_ERR_INVALID_ARGUMENT, "p_r must be positive");
        }
        if partnered != 0 && p_f != p_r {
            return fail(PQL_ERR_INVALID_ARGUMENT, format!("partnered design needs p_f == p_r, got {p_f} and {p_r}"));
        }
        let d = PqlDesign { p_f, p_r, partnered: partnered != 0, clusters: Vec::new() };
        *out = Box::into_raw(Box::new(d));
        Ok(PQL_OK)
    })
}

/// Appends a cluster of `n` rows. `x` is n x p_f and `z` is n x p_r, both
/// row-major; `z` is ignored for partnered designs and may be null there.
/// `trials` may be null (one trial per row).
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pql_design_add_cluster(
    design: *mut PqlDesign,
    n: usize,
    y: *const f64,
    x: *const f64,
    z: *const f64,
    trials: *const f64,
) -> i32 {
    guard(|| {
        let d = design.as_mut().ok_or_else(|| Fail(PQL_ERR_NULL_POINTER, "design is null".into()))?;
        if n == 0 {
            return fail(PQL_ERR_INVALID_ARGUMENT, "a cluster needs at least one row");
        }
        let y = DVector::from_column_slice(slice(y, n, "y")?);
        let x = DMatrix::from_row_slice(n, d.p_f, slice(x, n * d.p_f, "x")?);
        let z = if d.partnered { x.clone() } else { DMatrix::from_row_slice(n, d.p_r, slice(z, n * d.p_r, "z")?) };
        let mut c = ClusterData::new(y, x, z);
        if !trials.is_null() {
            c = c.with_trials(DVector::from_column_slice(slice(trials, n, "trials")?));
        }
        d.clusters.push(c);
        Ok(PQL_OK)
    })
}

/// Number of clusters added so far, or 0 for a null handle.
///
/// # Safety
/// `design` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pql_design_num_clusters(design: *const PqlDesign) -> usize {
    design.as_ref().map_or(0, |d| d.clusters.len())
}

/// # Safety
/// `design` must be null or a handle from `pql_design_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pql_design_free(design: *mut PqlDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}

/// Fits the model by PQL. `init_g` is the p_r x p_r starting (or, with
/// `PQL_G_FIXED`, working) covariance, row-major; null means identity.
/// On `PQL_OK` or `PQL_ERR_NOT_CONVERGED` a model handle is written to
/// `out`. The design handle stays owned by the caller.
///
/// # Safety
/// `design` must be a live handle, `init_g` null or p_r * p_r values, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pql_fit(
    design: *const PqlDesign,
    family: i32,
    g_mode: i32,
    init_g: *const f64,
    out: *mut *mut PqlModel,
) -> i32 {
    guard(|| {
        let d = handle(design, "design")?;
        if out.is_null() {
            return fail(PQL_ERR_NULL_POINTER, "out is null");
        }
        let family = family_of(family)?;
        let mode = match g_mode {
            PQL_G_SAMPLE_COV => GUpdateMode::SampleCov,
            PQL_G_FIXED => GUpdateMode::Fixed,
            _ => return fail(PQL_ERR_INVALID_ARGUMENT, format!("unknown G mode {g_mode}")),
        };
        let g0 = if init_g.is_null() {
            DMatrix::identity(d.p_r, d.p_r)
        } else {
            DMatrix::from_row_slice(d.p_r, d.p_r, slice(init_g, d.p_r * d.p_r, "init_g")?)
        };
        let built = ClusteredDesign::with_partnering(d.clusters.clone(), d.partnered)?;
        let config = SolverConfig { g_update_mode: mode, ..SolverConfig::default() };
        let fit = fit_pql(&built, family, &config, &g0, 1.0)?;
        let converged = fit.converged;
        let warning = fit.warnings.join("; ");
        *out = Box::into_raw(Box::new(PqlModel { design: built, fit }));
        if converged {
            Ok(PQL_OK)
        } else {
            fail(PQL_ERR_NOT_CONVERGED, format!("fit did not converge: {warning}"))
        }
    })
}

/// # Safety
/// `model` must be null or a handle from `pql_fit` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pql_model_free(model: *mut PqlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 1 when the fit converged, 0 otherwise or for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pql_model_converged(model: *const PqlModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.fit.converged))
}

/// Copies the p_f fixed effects into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pql_model_beta(model: *const PqlModel, out: *mut f64, len: usize) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        copy_out(m.fit.theta.beta.as_slice(), out, len)
    })
}

/// Copies the p_r predicted random effects of `cluster` (0-based).
///
/// # Safety
/// `model` must be a live handle and `out` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pql_model_random_effects(model: *const PqlModel, cluster: usize, out: *mut f64, len: usize) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let b = m.fit.theta.b.get(cluster).ok_or_else(|| Fail(PQL_ERR_INVALID_ARGUMENT, format!("cluster {cluster} out of range")))?;
        copy_out(b.as_slice(), out, len)
    })
}

/// Copies the p_r x p_r covariance estimate, row-major.
///
/// # Safety
/// `model` must be a live handle and `out` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pql_model_g_hat(model: *const PqlModel, out: *mut f64, len: usize) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let g = m.fit.g_hat.transpose();
        copy_out(g.as_slice(), out, len)
    })
}

/// Conditional-regime interval. With `cluster < 0` the target is fixed
/// effect `component`; otherwise random effect `component` of `cluster`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pql_conditional_interval(
    model: *const PqlModel,
    cluster: i64,
    component: usize,
    level: f64,
    out: *mut PqlInterval,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let (p_f, p_r) = (m.design.p_f(), m.design.p_r());
        let target = if cluster < 0 {
            TargetSelection::fixed_effect(component, p_f)
        } else {
            TargetSelection::random_effect(cluster as usize, component, p_r)
        };
        interval_out(&conditional_interval(&m.design, &m.fit, &target, level)?, out)
    })
}

/// Unconditional fixed-effect interval using the fit's covariance estimate.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pql_unconditional_fixed_interval(
    model: *const PqlModel,
    component: usize,
    level: f64,
    out: *mut PqlInterval,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let target = TargetSelection::fixed_effect(component, m.design.p_f());
        interval_out(&unconditional_fixed_interval(&m.design, &m.fit, &target, level, &m.fit.g_hat)?, out)
    })
}

/// Prediction-gap interval for random effect `component` of `cluster`.
/// `gamma` is used only with `PQL_REGIME_BALANCED`. Mixture quantiles use
/// 10,000 draws seeded by `seed`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pql_prediction_gap_interval(
    model: *const PqlModel,
    cluster: usize,
    component: usize,
    level: f64,
    regime: i32,
    gamma: f64,
    seed: u64,
    out: *mut PqlInterval,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let regime = match regime {
            PQL_REGIME_AUTO => Regime::Auto,
            PQL_REGIME_MANY_CLUSTERS => Regime::UncondManyClusters,
            PQL_REGIME_BALANCED => Regime::UncondBalanced { gamma },
            PQL_REGIME_LARGE_CLUSTERS => Regime::UncondLargeClusters,
            _ => return fail(PQL_ERR_INVALID_ARGUMENT, format!("unknown regime code {regime}")),
        };
        if component >= m.design.p_r() {
            return fail(PQL_ERR_INVALID_ARGUMENT, format!("component {component} out of range"));
        }
        let settings = InferenceSettings::default();
        let ivs = prediction_gap_interval(&m.design, &m.fit, cluster, Some(component), level, regime, &m.fit.g_hat, &settings, seed)?;
        interval_out(&ivs[0], out)
    })
}
