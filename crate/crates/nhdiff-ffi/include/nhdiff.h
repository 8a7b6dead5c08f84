#ifndef NHDIFF_H
#define NHDIFF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 How coefficient derivatives are evaluated.
 */
typedef enum NhdiffDerivatives {
  NHDIFF_DERIVATIVES_ANALYTIC = 0,
  NHDIFF_DERIVATIVES_FINITE_DIFFERENCE = 1,
  NHDIFF_DERIVATIVES_CROSS_CHECK = 2,
} NhdiffDerivatives;

/*
 Result of a C-callable function.
 */
typedef enum NhdiffStatus {
  NHDIFF_STATUS_OK = 0,
  NHDIFF_STATUS_NULL_POINTER = 1,
  NHDIFF_STATUS_INVALID_UTF8 = 2,
  /*
   Malformed or invalid configuration.
   */
  NHDIFF_STATUS_CONFIG = 3,
  NHDIFF_STATUS_INVALID_INPUT = 4,
  /*
   Degenerate metric, non-convergence, instability or another numerical failure.
   */
  NHDIFF_STATUS_NUMERICAL = 5,
  NHDIFF_STATUS_IO = 6,
  /*
   A Rust panic was caught at the boundary.
   */
  NHDIFF_STATUS_PANIC = 7,
} NhdiffStatus;

/*
 A validated run configuration.
 */
typedef struct NhdiffConfig NhdiffConfig;

/*
 A metric in N-adapted form.
 */
typedef struct NhdiffMetric NhdiffMetric;

/*
 Report and artifacts of a finished run.
 */
typedef struct NhdiffRun NhdiffRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null if none failed yet.

 The string stays valid until the next failing call on the same thread.
 */
const char *nhdiff_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nhdiff_version(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must be null or a pointer returned by an `nhdiff_*` function documented as
 caller-owned, not yet freed.
 */
void nhdiff_string_free(char *s);

/*
 Flat metric `diag(1, 1, -1, 1)` with vanishing N-connection.
 */
struct NhdiffMetric *nhdiff_metric_new_flat(void);

/*
 Builds a metric from the JSON `metric` section of a run configuration.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer to writable
 storage for one handle. On success `*out` owns a handle to release with
 [`nhdiff_metric_free`]; on failure `*out` is left untouched.
 */
enum NhdiffStatus nhdiff_metric_from_json(const char *json,
                                          enum NhdiffDerivatives derivatives,
                                          struct NhdiffMetric **out);

/*
 # Safety
 `metric` must be null or a handle from this library that has not been freed.
 */
void nhdiff_metric_free(struct NhdiffMetric *metric);

/*
 Canonical d-connection coefficients in the N-adapted frame at chart point `u`.

 # Safety
 `metric` must be a live handle, `u` must point to 4 readable doubles
 `(x1, x2, t, y)` and `out` to 64 writable doubles.
 */
enum NhdiffStatus nhdiff_metric_connection(const struct NhdiffMetric *metric,
                                           const double *u,
                                           double *out);

/*
 Torsion of the canonical d-connection, `out[(a * 4 + b) * 4 + c] = T^a_{bc}`.

 # Safety
 Same contract as [`nhdiff_metric_connection`].
 */
enum NhdiffStatus nhdiff_metric_torsion(const struct NhdiffMetric *metric,
                                        const double *u,
                                        double *out);

/*
 Distortion: Levi-Civita minus canonical d-connection.

 # Safety
 Same contract as [`nhdiff_metric_connection`].
 */
enum NhdiffStatus nhdiff_metric_distortion(const struct NhdiffMetric *metric,
                                           const double *u,
                                           double *out);

/*
 Levi-Civita connection in the N-adapted frame.

 # Safety
 Same contract as [`nhdiff_metric_connection`].
 */
enum NhdiffStatus nhdiff_metric_levi_civita(const struct NhdiffMetric *metric,
                                            const double *u,
                                            double *out);

/*
 Parses and validates a run configuration.

 On a schema failure the last error lists every problem, separated by `"; "`.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer to writable
 storage for one handle; release the handle with [`nhdiff_config_free`].
 */
enum NhdiffStatus nhdiff_config_parse(const char *json, struct NhdiffConfig **out);

/*
 Replaces the configured master seed.

 # Safety
 `config` must be a live handle.
 */
enum NhdiffStatus nhdiff_config_set_seed(struct NhdiffConfig *config, uint64_t seed);

/*
 # Safety
 `config` must be null or a handle from this library that has not been freed.
 */
void nhdiff_config_free(struct NhdiffConfig *config);

/*
 Executes a configuration on `threads` workers (`0` uses the default pool).

 A run whose checks fail still returns `Ok`; see [`nhdiff_run_exit_code`].

 # Safety
 `config` must be a live handle and `out` a valid pointer to writable storage for
 one handle; release the result with [`nhdiff_run_free`].
 */
enum NhdiffStatus nhdiff_run(const struct NhdiffConfig *config,
                             size_t threads,
                             struct NhdiffRun **out);

/*
 `0` if every configured check passed, `3` otherwise; `-1` for a null handle.

 # Safety
 `run` must be null or a live handle.
 */
int32_t nhdiff_run_exit_code(const struct NhdiffRun *run);

/*
 The run report as JSON; caller-owned, release with [`nhdiff_string_free`].
 Returns null on failure.

 # Safety
 `run` must be a live handle.
 */
char *nhdiff_run_report_json(const struct NhdiffRun *run);

/*
 Writes the artifacts and `report.json` into directory `dir`.

 # Safety
 `run` must be a live handle and `dir` a NUL-terminated string.
 */
enum NhdiffStatus nhdiff_run_write(const struct NhdiffRun *run, const char *dir);

/*
 # Safety
 `run` must be null or a handle from this library that has not been freed.
 */
void nhdiff_run_free(struct NhdiffRun *run);

/*
 Number of named acceptance checks.
 */
size_t nhdiff_check_count(void);

/*
 Runs one acceptance check by name or number and stores whether it passed.

 # Safety
 `name` must be a NUL-terminated string and `passed` a valid pointer to one
 writable `bool`.
 */
enum NhdiffStatus nhdiff_check_run(const char *name, uint64_t seed, bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NHDIFF_H */
