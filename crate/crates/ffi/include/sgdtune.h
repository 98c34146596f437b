#ifndef SGDTUNE_H
#define SGDTUNE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SgdtuneStatus {
  SGDTUNE_STATUS_OK = 0,
  SGDTUNE_STATUS_NULL_POINTER = 1,
  SGDTUNE_STATUS_INVALID_ARGUMENT = 2,
  SGDTUNE_STATUS_RUNTIME_ERROR = 3,
} SgdtuneStatus;

/**
 * A finished optimization trajectory.
 */
typedef struct SgdtuneRun SgdtuneRun;

/**
 * A cluster plus workload ready to be tuned.
 */
typedef struct SgdtuneScenario SgdtuneScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a scenario from a built-in setting (`'A'`, `'B'` or `'C'`), a
 * built-in workload name and a batch size.
 *
 * # Safety
 * `workload` must be a NUL-terminated string and `out` a valid pointer; the
 * returned scenario must be released with [`sgdtune_scenario_free`].
 */
enum SgdtuneStatus sgdtune_scenario_from_setting(char setting,
                                                 const char *workload,
                                                 uint64_t batch,
                                                 struct SgdtuneScenario **out);

/**
 * # Safety
 * `scenario` must come from [`sgdtune_scenario_from_setting`] and not have
 * been freed already. Null is a no-op.
 */
void sgdtune_scenario_free(struct SgdtuneScenario *scenario);

/**
 * Runs one optimizer (`"bespoke"`, `"generic_gp"`, `"random"`,
 * `"uniform_devices"` or `"uniform_gpus"`) for `budget` evaluations.
 *
 * # Safety
 * `scenario` must be a live scenario handle, `method` a NUL-terminated
 * string, `out` a valid pointer; the returned run must be released with
 * [`sgdtune_run_free`].
 */
enum SgdtuneStatus sgdtune_optimize(const struct SgdtuneScenario *scenario,
                                    const char *method,
                                    uint32_t budget,
                                    uint64_t seed,
                                    struct SgdtuneRun **out);

/**
 * # Safety
 * `run` must come from [`sgdtune_optimize`] and not have been freed already.
 * Null is a no-op.
 */
void sgdtune_run_free(struct SgdtuneRun *run);

/**
 * Number of evaluated configurations in the run; 0 for null.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
uintptr_t sgdtune_run_len(const struct SgdtuneRun *run);

/**
 * Best (lowest) measured iteration time of the run, in seconds. Returns
 * infinity for null or empty runs.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
double sgdtune_run_best(const struct SgdtuneRun *run);

/**
 * Measured objective of the `index`-th evaluation, in seconds.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum SgdtuneStatus sgdtune_run_objective(const struct SgdtuneRun *run,
                                         uintptr_t index,
                                         double *out);

/**
 * Best objective seen up to and including the `index`-th evaluation.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
enum SgdtuneStatus sgdtune_run_best_so_far(const struct SgdtuneRun *run,
                                           uintptr_t index,
                                           double *out);

/**
 * Compact textual form of the `index`-th configuration, or null when the
 * index is out of range. Release with [`sgdtune_string_free`].
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
char *sgdtune_run_config_digest(const struct SgdtuneRun *run, uintptr_t index);

/**
 * Message of the most recent error on this thread, or null. Release with
 * [`sgdtune_string_free`].
 */
char *sgdtune_last_error_message(void);

/**
 * # Safety
 * `s` must be a string returned by this library and not yet freed. Null is
 * a no-op.
 */
void sgdtune_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGDTUNE_H */
