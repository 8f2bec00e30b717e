#ifndef DENSITYPATH_H
#define DENSITYPATH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_CONFIG = 3,
  DP_STATUS_NUMERIC = 4,
  DP_STATUS_IO = 5,
  DP_STATUS_PANIC = 6,
} DpStatus;

// A problem configuration.
typedef struct DpProblem DpProblem;

// A finished optimization run.
typedef struct DpRun DpRun;

// One row of the per-epoch history.
typedef struct DpMetrics {
  size_t epoch;
  double action;
  double kinetic;
  double obstacle;
  double internal;
  double interaction;
  double fisher;
  double w2_rho0;
  double w2_rho1;
} DpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *dp_last_error(void);

// Library version as a static NUL-terminated string.
const char *dp_version(void);

// Looks up a registered problem by name.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum DpStatus dp_problem_from_name(const char *name, struct DpProblem **out);

// Parses a TOML configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum DpStatus dp_problem_from_toml(const char *toml, struct DpProblem **out);

// Applies one `key.path=value` override; the problem is unchanged on error.
//
// # Safety
// `problem` must come from this library; `assignment` must be NUL-terminated.
enum DpStatus dp_problem_set(struct DpProblem *problem, const char *assignment);

// Switches to the desk-scale settings.
//
// # Safety
// `problem` must come from this library.
enum DpStatus dp_problem_desk(struct DpProblem *problem);

// # Safety
// `problem` must come from this library; `out` must be writable.
enum DpStatus dp_problem_dim(const struct DpProblem *problem, size_t *out);

// # Safety
// `problem` must come from this library and not be used afterwards. NULL is ignored.
void dp_problem_free(struct DpProblem *problem);

// Runs the full optimization. Blocks until done.
//
// # Safety
// `problem` must come from this library; `out` must be writable.
enum DpStatus dp_run(const struct DpProblem *problem, struct DpRun **out);

// Number of history rows (epochs plus the post-warmup row).
//
// # Safety
// `run` must come from this library; `out` must be writable.
enum DpStatus dp_run_len(const struct DpRun *run, size_t *out);

// # Safety
// `run` must come from this library; `out` must be writable.
enum DpStatus dp_run_metrics(const struct DpRun *run, size_t row, struct DpMetrics *out);

// Writes the pushforward of the fixed export batch at time `t` into `out`
// as `rows × d` row-major values; `rows` receives the batch size.
// `out_len` must be at least `dp_export_rows() * d`.
//
// # Safety
// `run` must come from this library; `out` must hold `out_len` doubles.
enum DpStatus dp_run_positions(const struct DpRun *run,
                               double t,
                               double *out,
                               size_t out_len,
                               size_t *rows);

// Rows written by [`dp_run_positions`].
size_t dp_export_rows(void);

// # Safety
// `run` must come from this library and not be used afterwards. NULL is ignored.
void dp_run_free(struct DpRun *run);

// Empirical W2 between two row-major clouds with `d` columns.
//
// # Safety
// `x` must hold `n * d` doubles, `y` must hold `m * d`, `out` must be writable.
enum DpStatus dp_w2_empirical(const double *x,
                              size_t n,
                              const double *y,
                              size_t m,
                              size_t d,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSITYPATH_H */
