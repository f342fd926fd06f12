#ifndef MAISAC_H
#define MAISAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MaisacStatus {
  MAISAC_STATUS_OK = 0,
  MAISAC_STATUS_NULL_ARGUMENT = 1,
  MAISAC_STATUS_INVALID_UTF8 = 2,
  MAISAC_STATUS_INVALID_CONFIG = 3,
  MAISAC_STATUS_GEOMETRY = 4,
  MAISAC_STATUS_INFEASIBLE = 5,
  MAISAC_STATUS_OUT_OF_RANGE = 6,
  MAISAC_STATUS_PANIC = 7,
} MaisacStatus;

typedef enum MaisacScheme {
  MAISAC_SCHEME_JOINT_MA = 0,
  MAISAC_SCHEME_BS_MA = 1,
  MAISAC_SCHEME_USER_MA = 2,
  MAISAC_SCHEME_RAND_MA = 3,
  MAISAC_SCHEME_FPA = 4,
} MaisacScheme;

/**
 * A finished optimization run.
 */
typedef struct MaisacRun MaisacRun;

/**
 * A generated problem instance plus the engine settings it was loaded with.
 */
typedef struct MaisacScenario MaisacScenario;

/**
 * One logged iterate; `iter = 0` is the initial point.
 */
typedef struct MaisacRecord {
  size_t iter;
  double sum_rate_nats;
  /**
   * Linear sensing SINR.
   */
  double sinr_radar;
  double power_residual;
  double box_residual;
  double distance_residual;
  double elapsed_ms;
} MaisacRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a TOML run config (`[scenario]`, `[engine]`; empty means defaults)
 * and draws the instance for `seed`.
 *
 * # Safety
 * `config_toml` must be NULL or a NUL-terminated string; `out` must be NULL
 * or valid for one pointer write.
 */
enum MaisacStatus maisac_scenario_new(const char *config_toml,
                                      uint64_t seed,
                                      struct MaisacScenario **out);

/**
 * # Safety
 * `scenario` must be NULL or a handle from [`maisac_scenario_new`] not yet freed.
 */
void maisac_scenario_free(struct MaisacScenario *scenario);

/**
 * Overrides the scheme the scenario's engine settings will run. `scheme` is
 * a `MaisacScheme` value, taken as an integer so that stray values are
 * rejected instead of being undefined behavior.
 *
 * # Safety
 * `scenario` must be NULL or a live handle.
 */
enum MaisacStatus maisac_scenario_set_scheme(struct MaisacScenario *scenario, int32_t scheme);

/**
 * Initializes and optimizes; the layout jitter uses the scenario's seed.
 *
 * # Safety
 * `scenario` must be NULL or a live handle; `out` NULL or valid for one pointer write.
 */
enum MaisacStatus maisac_run(const struct MaisacScenario *scenario, struct MaisacRun **out);

/**
 * # Safety
 * `run` must be NULL or a handle from [`maisac_run`] not yet freed.
 */
void maisac_run_free(struct MaisacRun *run);

/**
 * Number of logged iterates, initial point included; 0 for NULL.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t maisac_run_len(const struct MaisacRun *run);

/**
 * 1 if the tolerance was met before the iteration limit, 0 otherwise or for NULL.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
int32_t maisac_run_converged(const struct MaisacRun *run);

/**
 * # Safety
 * `run` must be NULL or a live handle; `out` NULL or valid for one write.
 */
enum MaisacStatus maisac_run_record(const struct MaisacRun *run,
                                    size_t index,
                                    struct MaisacRecord *out);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns its full length.
 *
 * # Safety
 * `buf` must be NULL or valid for `len` byte writes.
 */
size_t maisac_last_error(char *buf, size_t len);

/**
 * Static description of a status code.
 */
const char *maisac_status_str(enum MaisacStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAISAC_H */
