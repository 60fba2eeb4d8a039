/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_POINTER = 1,
  LG_STATUS_INVALID_ARGUMENT = 2,
  LG_STATUS_EMPTY_SEQUENCE = 3,
  LG_STATUS_OUT_OF_ORDER = 4,
  LG_STATUS_DOUBLE_NOTIFY = 5,
  LG_STATUS_BUFFER_TOO_SMALL = 6,
  LG_STATUS_INTERNAL = 7,
} LgStatus;

typedef enum LgPreset {
  LG_PRESET_NO_GUARD = 0,
  LG_PRESET_ALWAYS_ON = 1,
  LG_PRESET_SINGLE_SIGNAL = 2,
  LG_PRESET_FULL = 3,
} LgPreset;

/**
 * Opaque monitor handle.
 */
typedef struct LgMonitor LgMonitor;

/**
 * Opaque pruner handle: config plus aggressiveness state.
 */
typedef struct LgPruner LgPruner;

/**
 * Sequence metrics under the default loop rule.
 */
typedef struct LgMetrics {
  double ttr;
  double cr;
  uintptr_t len;
  /**
   * Too short for a compression ratio; `cr` is 1.0.
   */
  bool short_sequence;
  bool is_loop;
} LgMetrics;

/**
 * Monitor output for one step. Fields guarded by a `has_*` flag are
 * meaningless when the flag is false.
 */
typedef struct LgDecision {
  uintptr_t step;
  double m_ttr;
  bool has_cr;
  double m_cr;
  uintptr_t streak;
  double novelty;
  bool warn;
  bool stall;
  bool has_tail;
  uintptr_t tail_period;
  uintptr_t bad_start;
  uintptr_t bad_end;
  bool trigger;
} LgDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *lg_last_error_message(void);

/**
 * NUL-terminated library version.
 */
const char *lg_version(void);

/**
 * Distinct-token ratio, compression ratio and loop flag of `tokens[0..len]`.
 *
 * # Safety
 * `tokens` must point to `len` readable `uint32_t`; `out` must be writable.
 */
enum LgStatus lg_sequence_metrics(const uint32_t *tokens, uintptr_t len, struct LgMetrics *out);

/**
 * Creates a monitor with default thresholds and the given preset.
 *
 * # Safety
 * `out` must be writable. The handle must be released with [`lg_monitor_free`].
 */
enum LgStatus lg_monitor_new(enum LgPreset preset, struct LgMonitor **out);

/**
 * # Safety
 * `m` must be NULL or a handle from [`lg_monitor_new`] not yet freed.
 */
void lg_monitor_free(struct LgMonitor *m);

/**
 * Feeds one decode step. Steps must start at 0 and increase by one.
 *
 * # Safety
 * `m` must be a live handle; `out` must be NULL or writable.
 */
enum LgStatus lg_monitor_update(struct LgMonitor *m,
                                uintptr_t step,
                                uint32_t token,
                                double p_max,
                                struct LgDecision *out);

/**
 * Acknowledges the trigger of the last update.
 *
 * # Safety
 * `m` must be a live handle.
 */
enum LgStatus lg_monitor_notify(struct LgMonitor *m);

/**
 * Interventions acknowledged so far, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
uintptr_t lg_monitor_interventions(const struct LgMonitor *m);

/**
 * Creates a pruner with the default budget layout.
 *
 * # Safety
 * `out` must be writable. Release with [`lg_pruner_free`].
 */
enum LgStatus lg_pruner_new(struct LgPruner **out);

/**
 * # Safety
 * `p` must be NULL or a handle from [`lg_pruner_new`] not yet freed.
 */
void lg_pruner_free(struct LgPruner *p);

/**
 * Advances the aggressiveness state; call once per step.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum LgStatus lg_pruner_observe(struct LgPruner *p, uintptr_t step, bool triggered);

/**
 * Current aggressiveness level, or 0 for NULL.
 *
 * # Safety
 * `p` must be NULL or a live handle.
 */
uintptr_t lg_pruner_level(const struct LgPruner *p);

/**
 * Writes the sorted keep set for newest position `t` into `out[0..cap]`.
 *
 * `*out_len` always receives the required length; if it exceeds `cap`
 * nothing is written and `BufferTooSmall` is returned.
 *
 * # Safety
 * `p` must be a live handle; `out` must have room for `cap` elements;
 * `out_len` must be writable.
 */
enum LgStatus lg_pruner_keep_set(const struct LgPruner *p,
                                 uintptr_t t,
                                 bool has_bad_span,
                                 uintptr_t bad_start,
                                 uintptr_t bad_end,
                                 uintptr_t *out,
                                 uintptr_t cap,
                                 uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
