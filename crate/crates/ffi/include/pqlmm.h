#ifndef PQLMM_H
#define PQLMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PQL_OK 0

#define PQL_ERR_NULL_POINTER 1

#define PQL_ERR_INVALID_ARGUMENT 2

#define PQL_ERR_DIMENSION 3

#define PQL_ERR_DOMAIN 4

#define PQL_ERR_INVALID_DESIGN 5

#define PQL_ERR_NUMERICAL 6

#define PQL_ERR_UNSUPPORTED 7

// The fit finished without meeting its convergence tolerances. The handle
// is still returned.
#define PQL_ERR_NOT_CONVERGED 8

#define PQL_ERR_PANIC 99

#define PQL_FAMILY_GAUSSIAN 0

#define PQL_FAMILY_POISSON 1

#define PQL_FAMILY_BERNOULLI 2

#define PQL_FAMILY_BINOMIAL 3

#define PQL_G_SAMPLE_COV 0

#define PQL_G_FIXED 1

#define PQL_REGIME_AUTO 0

#define PQL_REGIME_MANY_CLUSTERS 1

#define PQL_REGIME_BALANCED 2

#define PQL_REGIME_LARGE_CLUSTERS 3

// Design under construction.
typedef struct PqlDesign PqlDesign;

// A fitted model together with the design it was fitted to.
typedef struct PqlModel PqlModel;

// Interval for one scalar target.
typedef struct PqlInterval {
  double estimate;
  double lower;
  double upper;
  double level;
} PqlInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pql_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into the library from this thread.
const char *pql_last_error_message(void);

// Starts a design with `p_f` fixed and `p_r` random covariates. When
// `partnered` is nonzero the random covariates are the fixed ones and
// `p_r` must equal `p_f`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one pointer.
int32_t pql_design_new(size_t p_f, size_t p_r, int32_t partnered, struct PqlDesign **out);

// Appends a cluster of `n` rows. `x` is n x p_f and `z` is n x p_r, both
// row-major; `z` is ignored for partnered designs and may be null there.
// `trials` may be null (one trial per row).
//
// # Safety
// Pointers must reference arrays of the stated lengths.
int32_t pql_design_add_cluster(struct PqlDesign *design,
                               size_t n,
                               const double *y,
                               const double *x,
                               const double *z,
                               const double *trials);

// Number of clusters added so far, or 0 for a null handle.
//
// # Safety
// `design` must be null or a live handle.
size_t pql_design_num_clusters(const struct PqlDesign *design);

// # Safety
// `design` must be null or a handle from `pql_design_new` not yet freed.
void pql_design_free(struct PqlDesign *design);

// Fits the model by PQL. `init_g` is the p_r x p_r starting (or, with
// `PQL_G_FIXED`, working) covariance, row-major; null means identity.
// On `PQL_OK` or `PQL_ERR_NOT_CONVERGED` a model handle is written to
// `out`. The design handle stays owned by the caller.
//
// # Safety
// `design` must be a live handle, `init_g` null or p_r * p_r values, and
// `out` writable.
int32_t pql_fit(const struct PqlDesign *design,
                int32_t family,
                int32_t g_mode,
                const double *init_g,
                struct PqlModel **out);

// # Safety
// `model` must be null or a handle from `pql_fit` not yet freed.
void pql_model_free(struct PqlModel *model);

// 1 when the fit converged, 0 otherwise or for a null handle.
//
// # Safety
// `model` must be null or a live handle.
int32_t pql_model_converged(const struct PqlModel *model);

// Copies the p_f fixed effects into `out`.
//
// # Safety
// `model` must be a live handle and `out` hold `len` values.
int32_t pql_model_beta(const struct PqlModel *model, double *out, size_t len);

// Copies the p_r predicted random effects of `cluster` (0-based).
//
// # Safety
// `model` must be a live handle and `out` hold `len` values.
int32_t pql_model_random_effects(const struct PqlModel *model,
                                 size_t cluster,
                                 double *out,
                                 size_t len);

// Copies the p_r x p_r covariance estimate, row-major.
//
// # Safety
// `model` must be a live handle and `out` hold `len` values.
int32_t pql_model_g_hat(const struct PqlModel *model, double *out, size_t len);

// Conditional-regime interval. With `cluster < 0` the target is fixed
// effect `component`; otherwise random effect `component` of `cluster`.
//
// # Safety
// `model` must be a live handle and `out` writable.
int32_t pql_conditional_interval(const struct PqlModel *model,
                                 int64_t cluster,
                                 size_t component,
                                 double level,
                                 struct PqlInterval *out);

// Unconditional fixed-effect interval using the fit's covariance estimate.
//
// # Safety
// `model` must be a live handle and `out` writable.
int32_t pql_unconditional_fixed_interval(const struct PqlModel *model,
                                         size_t component,
                                         double level,
                                         struct PqlInterval *out);

// Prediction-gap interval for random effect `component` of `cluster`.
// `gamma` is used only with `PQL_REGIME_BALANCED`. Mixture quantiles use
// 10,000 draws seeded by `seed`.
//
// # Safety
// `model` must be a live handle and `out` writable.
int32_t pql_prediction_gap_interval(const struct PqlModel *model,
                                    size_t cluster,
                                    size_t component,
                                    double level,
                                    int32_t regime,
                                    double gamma,
                                    uint64_t seed,
                                    struct PqlInterval *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PQLMM_H */
