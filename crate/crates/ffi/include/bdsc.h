#ifndef BDSC_H
#define BDSC_H

/* Generated by cbindgen from the bdsc-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  BDSC_STATUS_OK = 0,
  BDSC_STATUS_NULL_POINTER = 1,
  BDSC_STATUS_INVALID_UTF8 = 2,
  BDSC_STATUS_INVALID_ARGUMENT = 3,
  BDSC_STATUS_RUNTIME_ERROR = 4,
  BDSC_STATUS_INDEX_OUT_OF_RANGE = 5,
} BdscStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct BdscConfig BdscConfig;

/**
 * Opaque finished run.
 */
typedef struct BdscRun BdscRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null when
 * the last call succeeded. The caller owns the returned string.
 */
char *bdsc_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by a `bdsc_*` call and not
 * yet freed.
 */
void bdsc_string_free(char *s);

/**
 * Library version as a static string; do not free.
 */
const char *bdsc_version(void);

/**
 * Build a minimal configuration for `pipeline` and `model` with explicit
 * seeds. On success writes a handle into `out`.
 *
 * # Safety
 * `pipeline` and `model` must be valid NUL-terminated strings and `out` a
 * valid pointer.
 */
BdscStatus bdsc_config_new(const char *pipeline,
                           const char *model,
                           uint64_t master_seed,
                           uint64_t b_seed,
                           BdscConfig **out);

/**
 * Parse a configuration from a TOML file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
BdscStatus bdsc_config_from_file(const char *path, BdscConfig **out);

/**
 * Parse a configuration from TOML text.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string and `out` a valid pointer.
 */
BdscStatus bdsc_config_from_toml(const char *text, BdscConfig **out);

/**
 * Apply a dotted-key override (`grid.n_steps=100`, `model.sigma=0.4`, ...).
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` valid strings.
 */
BdscStatus bdsc_config_override(BdscConfig *config, const char *key, const char *value);

/**
 * Set the artifact output directory.
 *
 * # Safety
 * `config` must be a live handle and `dir` a valid string.
 */
BdscStatus bdsc_config_set_out_dir(BdscConfig *config, const char *dir);

/**
 * Release a configuration handle.
 *
 * # Safety
 * `config` must come from this library and not be freed twice.
 */
void bdsc_config_free(BdscConfig *config);

/**
 * Execute the configured pipeline; artifacts land in the configured
 * output directory. On success writes a run handle into `out`.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
BdscStatus bdsc_run(const BdscConfig *config, BdscRun **out);

/**
 * 1 when every check of the run passed, 0 otherwise.
 *
 * # Safety
 * `run` must be a live handle.
 */
int32_t bdsc_run_all_passed(const BdscRun *run);

/**
 * Number of check records in the run.
 *
 * # Safety
 * `run` must be a live handle.
 */
uintptr_t bdsc_run_check_count(const BdscRun *run);

/**
 * Name of check `index` as `suite/criterion`; caller frees the string.
 *
 * # Safety
 * `run` must be a live handle.
 */
char *bdsc_run_check_name(const BdscRun *run, uintptr_t index);

/**
 * Value, tolerance, and pass flag of check `index`.
 *
 * # Safety
 * `run` must be a live handle; non-null outputs must be valid pointers.
 */
BdscStatus bdsc_run_check_result(const BdscRun *run,
                                 uintptr_t index,
                                 double *value,
                                 double *tolerance,
                                 int32_t *pass);

/**
 * The run's human-readable summary table; caller frees the string.
 *
 * # Safety
 * `run` must be a live handle.
 */
char *bdsc_run_summary(const BdscRun *run);

/**
 * Release a run handle.
 *
 * # Safety
 * `run` must come from this library and not be freed twice.
 */
void bdsc_run_free(BdscRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDSC_H */
