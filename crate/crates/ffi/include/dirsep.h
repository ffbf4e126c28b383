#ifndef DIRSEP_H
#define DIRSEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsxStatus {
  DSX_STATUS_OK = 0,
  DSX_STATUS_NULL_POINTER = 1,
  DSX_STATUS_INVALID_ARGUMENT = 2,
  DSX_STATUS_IO = 3,
  DSX_STATUS_FORMAT = 4,
  DSX_STATUS_SHAPE = 5,
  DSX_STATUS_INCOMPATIBLE = 6,
  DSX_STATUS_NUMERICAL = 7,
  DSX_STATUS_DEGENERATE_SIGNAL = 8,
  DSX_STATUS_INTERNAL = 9,
} DsxStatus;

// A loaded network. Shareable between streams; read-only after loading.
typedef struct DsxModel DsxModel;

// One streaming session with its own recurrent state.
typedef struct DsxStream DsxStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *dsx_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DsxStatus dsx_model_load(const char *path, struct DsxModel **out);

// Releases a model. Streams created from it stay valid.
//
// # Safety
// `model` must come from [`dsx_model_load`] and not be freed twice.
void dsx_model_free(struct DsxModel *model);

// Sector count, samples per streaming chunk, and output delay in samples.
//
// # Safety
// `model` must be a live handle; output pointers may be null to skip them.
enum DsxStatus dsx_model_info(const struct DsxModel *model,
                              uint32_t *n_sectors,
                              uint32_t *chunk_samples,
                              uint32_t *delay_samples);

// Offline extraction of `len` samples into `out` (also `len` samples).
//
// # Safety
// Input pointers must be valid for `len` reads and `out` for `len` writes.
enum DsxStatus dsx_infer(const struct DsxModel *model,
                         uint32_t sector_mask,
                         const double *ref_mic,
                         const double *struct_mic,
                         size_t len,
                         double *out);

// Starts a stream extracting the sectors in `sector_mask`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum DsxStatus dsx_stream_new(const struct DsxModel *model,
                              uint32_t sector_mask,
                              struct DsxStream **out);

// Consumes one chunk per channel and writes one chunk of output, delayed
// by the model's lookahead. `len` must equal the chunk size and
// `sector_mask` the stream's query.
//
// # Safety
// `stream` must be a live handle; buffers must hold `len` samples.
enum DsxStatus dsx_stream_step(struct DsxStream *stream,
                               uint32_t sector_mask,
                               const double *ref_mic,
                               const double *struct_mic,
                               size_t len,
                               double *out);

// Clears the stream history and switches to `sector_mask`.
//
// # Safety
// `stream` must be a live handle.
enum DsxStatus dsx_stream_reset(struct DsxStream *stream, uint32_t sector_mask);

// # Safety
// `stream` must come from [`dsx_stream_new`] and not be freed twice.
void dsx_stream_free(struct DsxStream *stream);

// Scale-invariant SDR of `est` against `reference`, in dB.
//
// # Safety
// Both inputs must be valid for `len` reads; `out_db` must be writable.
enum DsxStatus dsx_si_sdr(const double *est, const double *reference, size_t len, double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIRSEP_H */
