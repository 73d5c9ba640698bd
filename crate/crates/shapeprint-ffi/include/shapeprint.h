/* C interface to the shapeprint shaping and fingerprinting library. */

#ifndef SHAPEPRINT_H
#define SHAPEPRINT_H

/* Generated by cbindgen from the shapeprint-ffi crate; do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code for every fallible entry point. `SP_OK` is zero so calls can
// be checked with `if (sp_...(...)) { ... }`.
typedef enum {
  // Success.
  SP_OK = 0,
  // A required pointer argument was NULL.
  SP_ERR_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  SP_ERR_INVALID_UTF8 = 2,
  // An argument was outside its documented domain.
  SP_ERR_INVALID_ARGUMENT = 3,
  // A caller-supplied buffer was too small for the result.
  SP_ERR_BUFFER_TOO_SMALL = 4,
  // A file could not be read, written, or parsed.
  SP_ERR_IO = 5,
  // The input carried too little data for the operation.
  SP_ERR_EMPTY_INPUT = 6,
  // The independence test degenerated to a single row or column.
  SP_ERR_UNTESTABLE = 7,
  // Real traffic exceeded what the shaping rate can carry.
  SP_ERR_OVERLOAD = 8,
  // A packet size fell outside the tiered padding table.
  SP_ERR_UNSUPPORTED_SIZE = 9,
  // A panic was caught at the boundary; state may be stale but the
  // process is intact.
  SP_ERR_PANIC = 10,
  // Any other library error; see `sp_last_error_message`.
  SP_ERR_OTHER = 11,
} sp_status;

// Opaque set of learnt device profiles.
typedef struct sp_profiles sp_profiles;

// Opaque packet trace.
typedef struct sp_trace sp_trace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sp_version(void);

// Static name of a status code, e.g. `"SP_ERR_IO"`.
const char *sp_status_name(sp_status status);

// Message from the most recent failing call on this thread, or an empty
// string. The pointer stays valid until the next failing call on the same
// thread.
const char *sp_last_error_message(void);

// Loads a trace from a CSV trace file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
sp_status sp_trace_load(const char *path, sp_trace **out);

// Writes a trace to a CSV trace file.
//
// # Safety
// `trace` must be a live handle; `path` must be a NUL-terminated string.
sp_status sp_trace_save(const sp_trace *trace, const char *path);

// Releases a trace handle. NULL is a no-op.
//
// # Safety
// `trace` must be NULL or a handle not freed before; it is invalid after.
void sp_trace_free(sp_trace *trace);

// Number of packets in the trace; 0 if `trace` is NULL.
//
// # Safety
// `trace` must be NULL or a live handle.
size_t sp_trace_len(const sp_trace *trace);

// Capture duration in seconds; NaN if `trace` is NULL.
//
// # Safety
// `trace` must be NULL or a live handle.
double sp_trace_duration(const sp_trace *trace);

// Mean packet rate in packets per second; NaN if `trace` is NULL.
//
// # Safety
// `trace` must be NULL or a live handle.
double sp_trace_mean_rate(const sp_trace *trace);

// Number of devices in the built-in synthetic corpus.
size_t sp_corpus_device_count(void);

// Writes the NUL-terminated identifier of corpus device `index` into `buf`.
//
// # Safety
// `buf` must be valid for writes of `cap` bytes.
sp_status sp_corpus_device_id(size_t index, char *buf, size_t cap);

// Synthesises `duration` seconds of traffic for corpus device `index`,
// seeding the generator with `seed`.
//
// # Safety
// `out` must be valid for writes.
sp_status sp_synth_device(size_t index, double duration, uint64_t seed, sp_trace **out);

// Applies slotted-emission shaping: packets are carried on a slot grid of
// `rate` slots per second, cover packets are injected with probability `q`
// per period of `period` seconds, and every emitted packet is padded by a
// random amount up to `pad_window` bytes. Cover sizes are drawn from the
// input trace's own size distribution.
//
// # Safety
// `trace` must be a live handle; `out` must be valid for writes.
sp_status sp_stp_shape(const sp_trace *trace,
                       double q,
                       double period,
                       double rate,
                       uint32_t pad_window,
                       uint64_t seed,
                       sp_trace **out);

// Applies constant-rate shaping: a packet of exactly `pad_to` bytes every
// `1/rate` seconds regardless of real traffic.
//
// # Safety
// `trace` must be a live handle; `out` must be valid for writes.
sp_status sp_ilp_shape(const sp_trace *trace, double rate, uint32_t pad_to, sp_trace **out);

// Learns one profile per trace and marks each device's most frequent
// corpus-unique packet size.
//
// # Safety
// `traces` must point to `len` live trace handles; `out` must be valid for
// writes.
sp_status sp_profiles_learn(const sp_trace *const *traces, size_t len, sp_profiles **out);

// Saves profiles into `dir` (created if missing).
//
// # Safety
// `profiles` must be a live handle; `dir` must be a NUL-terminated string.
sp_status sp_profiles_save(const sp_profiles *profiles, const char *dir);

// Loads profiles previously written by `sp_profiles_save`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be valid for writes.
sp_status sp_profiles_load(const char *dir, sp_profiles **out);

// Number of profiles in the set; 0 if `profiles` is NULL.
//
// # Safety
// `profiles` must be NULL or a live handle.
size_t sp_profiles_len(const sp_profiles *profiles);

// Writes the NUL-terminated identifier of profile `index` into `buf`.
//
// # Safety
// `profiles` must be a live handle; `buf` must be valid for writes of `cap`
// bytes.
sp_status sp_profiles_device_id(const sp_profiles *profiles, size_t index, char *buf, size_t cap);

// Releases a profile-set handle. NULL is a no-op.
//
// # Safety
// `profiles` must be NULL or a handle not freed before; it is invalid after.
void sp_profiles_free(sp_profiles *profiles);

// Classifies a trace against the profiles by nearest packet-size
// distribution. Writes the winning device identifier into `id_buf` and the
// cosine distance into `distance_out`.
//
// # Safety
// `profiles` and `trace` must be live handles; `id_buf` must be valid for
// writes of `id_cap` bytes; `distance_out` must be valid for writes.
sp_status sp_classify_dominant(const sp_profiles *profiles,
                               const sp_trace *trace,
                               char *id_buf,
                               size_t id_cap,
                               double *distance_out);

// Estimates how many of the profiled devices share the aggregate `trace`,
// from its mean packet rate.
//
// # Safety
// `profiles` and `trace` must be live handles; `out` must be valid for
// writes.
sp_status sp_estimate_count(const sp_profiles *profiles, const sp_trace *trace, size_t *out);

// Pearson chi-squared independence test between inter-arrival gaps and
// packet sizes. `reject_out` is true when the statistic exceeds the 95%
// critical value.
//
// # Safety
// `trace` must be a live handle; the four output pointers must be valid for
// writes.
sp_status sp_chi_squared(const sp_trace *trace,
                         double *statistic_out,
                         size_t *df_out,
                         double *critical_out,
                         bool *reject_out);

// Cosine distance between two equal-length vectors.
//
// # Safety
// `a` and `b` must be valid for reads of `len` doubles; `out` must be valid
// for writes.
sp_status sp_cosine_distance(const double *a, const double *b, size_t len, double *out);

// Jensen-Shannon distance (square root of the base-2 divergence, in
// [0, 1]) between two equal-length non-negative vectors, each treated as an
// unnormalised distribution over indices.
//
// # Safety
// `a` and `b` must be valid for reads of `len` doubles; `out` must be valid
// for writes.
sp_status sp_jsd(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHAPEPRINT_H */
