#pragma once

/* Generated by cbindgen from fedmask-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Guessing strategy selector for [`fm_attack_argmax`].
 */
typedef enum FmGuessStrategy {
  /**
   * Point at the largest masked output.
   */
  FM_GUESS_STRATEGY_MASKED_ARGMAX = 0,
  /**
   * Hypothesize a group coefficient and invert it within one group.
   */
  FM_GUESS_STRATEGY_GROUP_HYPOTHESIS = 1,
} FmGuessStrategy;

/**
 * Result of every C-ABI call.
 */
typedef enum FmStatus {
  /**
   * Success.
   */
  FM_STATUS_OK = 0,
  /**
   * A protocol claim failed verification.
   */
  FM_STATUS_VERIFICATION = 1,
  /**
   * Input data could not be read or parsed.
   */
  FM_STATUS_INGESTION = 2,
  /**
   * Shapes, domains, or the wire protocol were violated.
   */
  FM_STATUS_PROTOCOL = 3,
  /**
   * A peer did not respond in time.
   */
  FM_STATUS_TIMEOUT = 4,
  /**
   * The call itself was malformed (bad config, null pointer, wrong order).
   */
  FM_STATUS_USAGE = 5,
  /**
   * A panic was caught at the boundary; state may be stale but memory is
   * safe.
   */
  FM_STATUS_INTERNAL = 6,
} FmStatus;

/**
 * An owned training run: a validated configuration plus, after
 * [`fm_trainer_run`], its outcome.
 */
typedef struct FmTrainer FmTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Latest error message for this thread, or an empty string. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *fm_last_error(void);

/**
 * Release a string returned by any `fm_*` function. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library and
 * not yet freed.
 */
void fm_string_free(char *s);

/**
 * Build a trainer from configuration JSON (same schema as the `fedmask`
 * binary's config files).
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum FmStatus fm_trainer_from_json(const char *config_json, struct FmTrainer **out);

/**
 * Build a trainer from a configuration file on disk.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum FmStatus fm_trainer_from_file(const char *path, struct FmTrainer **out);

/**
 * Execute the configured run in-process (every round still crosses the
 * wire codec). Rerunning replaces the previous outcome.
 *
 * # Safety
 * `trainer` must be a live pointer from `fm_trainer_from_*`.
 */
enum FmStatus fm_trainer_run(struct FmTrainer *trainer);

/**
 * Number of completed rounds.
 *
 * # Safety
 * `trainer` must be live; `out` must be a valid pointer.
 */
enum FmStatus fm_trainer_rounds_completed(const struct FmTrainer *trainer, uint64_t *out);

/**
 * Training loss of the final round.
 *
 * # Safety
 * `trainer` must be live; `out` must be a valid pointer.
 */
enum FmStatus fm_trainer_final_loss(const struct FmTrainer *trainer, double *out);

/**
 * Per-round metrics as CSV text.
 *
 * # Safety
 * `trainer` must be live; `out` must be a valid pointer; free the string
 * with `fm_string_free`.
 */
enum FmStatus fm_trainer_metrics_csv(const struct FmTrainer *trainer, char **out);

/**
 * The run manifest as JSON text.
 *
 * # Safety
 * `trainer` must be live; `out` must be a valid pointer; free the string
 * with `fm_string_free`.
 */
enum FmStatus fm_trainer_manifest_json(const struct FmTrainer *trainer, char **out);

/**
 * Hex SHA-256 over the exact bit pattern of the final weights.
 *
 * # Safety
 * `trainer` must be live; `out` must be a valid pointer; free the string
 * with `fm_string_free`.
 */
enum FmStatus fm_trainer_param_hash(const struct FmTrainer *trainer, char **out);

/**
 * Release a trainer handle. Null is a no-op.
 *
 * # Safety
 * `trainer` must be null or a live pointer from `fm_trainer_from_*`, not
 * yet freed.
 */
void fm_trainer_free(struct FmTrainer *trainer);

/**
 * Run the full verification battery. Writes a multi-line text report and
 * returns `FM_STATUS_OK` only if every check passed
 * (`FM_STATUS_VERIFICATION` otherwise). `inject_swapped_corrections`
 * deliberately corrupts client uploads to prove the battery notices.
 *
 * # Safety
 * `report_out` must be a valid pointer; free the string with
 * `fm_string_free`.
 */
enum FmStatus fm_verify(uint64_t seed,
                        uint64_t trials,
                        bool inject_swapped_corrections,
                        char **report_out);

/**
 * Broadcast-ambiguity probe; writes the JSON report.
 *
 * # Safety
 * `dims` must point to `dims_len` layer widths; `json_out` must be a valid
 * pointer; free the string with `fm_string_free`.
 */
enum FmStatus fm_attack_ambiguity(const size_t *dims,
                                  size_t dims_len,
                                  size_t groups,
                                  size_t instances,
                                  uint64_t seed,
                                  char **json_out);

/**
 * Upload-gradient-ambiguity probe; writes the JSON report.
 *
 * # Safety
 * `dims` must point to `dims_len` layer widths; `json_out` must be a valid
 * pointer; free the string with `fm_string_free`.
 */
enum FmStatus fm_attack_grad_ambiguity(const size_t *dims,
                                       size_t dims_len,
                                       size_t groups,
                                       size_t candidates,
                                       size_t shard_size,
                                       uint64_t seed,
                                       char **json_out);

/**
 * Monte-Carlo argmax-guessing probe; writes the JSON report.
 *
 * # Safety
 * `json_out` must be a valid pointer; free the string with
 * `fm_string_free`.
 */
enum FmStatus fm_attack_argmax(size_t outputs,
                               size_t groups,
                               uint64_t trials,
                               enum FmGuessStrategy strategy,
                               uint64_t seed,
                               char **json_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus
