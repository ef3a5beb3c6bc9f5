#ifndef LPM_H
#define LPM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LpmStatus {
  LPM_STATUS_OK = 0,
  LPM_STATUS_NULL_POINTER = 1,
  LPM_STATUS_INVALID_UTF8 = 2,
  LPM_STATUS_INVALID_ARGUMENT = 3,
  LPM_STATUS_CONFIG = 4,
  LPM_STATUS_PROTOCOL = 5,
  LPM_STATUS_BUFFER_TOO_SMALL = 6,
  LPM_STATUS_NUMERIC = 7,
  LPM_STATUS_IO = 8,
  LPM_STATUS_INTERNAL = 9,
  LPM_STATUS_PANIC = 10,
} LpmStatus;

/**
 * Live session: one backbone/refiner pair driven in real time.
 */
typedef struct LpmSession LpmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Owned by the library; valid
 * until the next failing call on the same thread.
 */
const char *lpm_last_error(void);

/**
 * Library version as a static string.
 */
const char *lpm_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` is null or came from this library and has not been freed.
 */
void lpm_string_free(char *s);

/**
 * Chunk indices kept in the attention window when generating `current`,
 * ascending. Writes at most `cap` indices to `out` and the full count to
 * `out_len`; returns `BUFFER_TOO_SMALL` if `cap` is short.
 *
 * # Safety
 * `out` points to `cap` writable `size_t`s (may be null when `cap` is 0);
 * `out_len` is writable.
 */
enum LpmStatus lpm_retained_set(size_t current,
                                size_t sink_chunks,
                                size_t recent_chunks,
                                size_t *out,
                                size_t cap,
                                size_t *out_len);

/**
 * Runs a scripted session of `n_chunks` chunks and returns its NDJSON
 * trace. `config_json` and `script_ndjson` may be null for defaults and an
 * empty script.
 *
 * # Safety
 * String arguments are null or valid NUL-terminated strings; `out` is
 * writable.
 */
enum LpmStatus lpm_run_session(const char *config_json,
                               const char *script_ndjson,
                               size_t n_chunks,
                               char **out);

/**
 * Starts a live session. `max_chunks` of 0 means unbounded.
 *
 * # Safety
 * `config_json` is null or a valid NUL-terminated string; `out` is
 * writable.
 */
enum LpmStatus lpm_session_new(const char *config_json, size_t max_chunks, struct LpmSession **out);

/**
 * Feeds one client message (the JSON wire format, without `start`).
 *
 * # Safety
 * `s` is a live handle; `msg_json` is a valid NUL-terminated string.
 */
enum LpmStatus lpm_session_send(struct LpmSession *s, const char *msg_json);

/**
 * Writes 1 to `out` when a step may run now (gate open or end requested).
 *
 * # Safety
 * `s` is a live handle; `out` is writable.
 */
enum LpmStatus lpm_session_ready(const struct LpmSession *s, int32_t *out);

/**
 * Writes 1 to `out` once the session ended or spent its chunk budget.
 *
 * # Safety
 * `s` is a live handle; `out` is writable.
 */
enum LpmStatus lpm_session_finished(const struct LpmSession *s, int32_t *out);

/**
 * Runs one boundary and chunk, blocking for the configured stage
 * latencies. `out` receives the server messages as NDJSON.
 *
 * # Safety
 * `s` is a live handle; `out` is writable.
 */
enum LpmStatus lpm_session_step(struct LpmSession *s, char **out);

/**
 * Full trace so far as NDJSON.
 *
 * # Safety
 * `s` is a live handle; `out` is writable.
 */
enum LpmStatus lpm_session_trace(const struct LpmSession *s, char **out);

/**
 * Releases a session. Null is a no-op.
 *
 * # Safety
 * `s` is null or a live handle from [`lpm_session_new`].
 */
void lpm_session_free(struct LpmSession *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPM_H */
