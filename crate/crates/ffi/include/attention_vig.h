#ifndef ATTENTION_VIG_H
#define ATTENTION_VIG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AvigStatus {
  AVIG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AVIG_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  AVIG_STATUS_INVALID_UTF8 = 2,
  /**
   * A caller-allocated output buffer was too small.
   */
  AVIG_STATUS_BUFFER_TOO_SMALL = 3,
  AVIG_STATUS_CONFIG = 4,
  AVIG_STATUS_INVALID_INPUT = 5,
  AVIG_STATUS_DIMENSION = 6,
  AVIG_STATUS_CONTRACT = 7,
  AVIG_STATUS_FORMAT = 8,
  AVIG_STATUS_IO = 9,
  /**
   * Internal failure; the message names the cause.
   */
  AVIG_STATUS_PANIC = 10,
} AvigStatus;

/**
 * Opaque patch graph handle.
 */
typedef struct AvigGraph AvigGraph;

/**
 * Opaque model handle.
 */
typedef struct AvigModel AvigModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *avig_version(void);

/**
 * Message of the last failed call on this thread, or null after a success.
 * Valid until the next call into the library on this thread.
 */
const char *avig_last_error(void);

/**
 * Builds a freshly initialized model from a preset name (`S`, `M`, `B`, `Micro`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AvigStatus avig_model_from_preset(const char *preset, uint64_t seed, struct AvigModel **out);

/**
 * Loads a checkpoint written by `avig train` or [`avig_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AvigStatus avig_model_load(const char *path, struct AvigModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum AvigStatus avig_model_save(const struct AvigModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void avig_model_free(struct AvigModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvigStatus avig_model_num_params(const struct AvigModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvigStatus avig_model_num_classes(const struct AvigModel *model, size_t *out);

/**
 * Multiply-accumulates of one forward pass at `resolution × resolution`.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AvigStatus avig_model_flops(const struct AvigModel *model, size_t resolution, uint64_t *out);

/**
 * Inference-mode logits for `n` images of shape `[c, h, w]`, written as
 * `[n, num_classes]` into `logits`, which holds `logits_len` values.
 *
 * # Safety
 * `images` must hold `n·c·h·w` values and `logits` `logits_len` values.
 */
enum AvigStatus avig_model_predict(const struct AvigModel *model,
                                   const double *images,
                                   size_t n,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   double *logits,
                                   size_t logits_len);

/**
 * Query-key cosine similarity of patch `(row, col)` to every patch of the
 * first stage grid, for one `[c, h, w]` image. The grid extent is written to
 * `out_height`/`out_width` and the row-major values to `out`.
 *
 * # Safety
 * `image` must hold `c·h·w` values, `out` `out_len` values, and both
 * extent pointers must be writable.
 */
enum AvigStatus avig_model_heatmap(const struct AvigModel *model,
                                   const double *image,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   size_t row,
                                   size_t col,
                                   double *out,
                                   size_t out_len,
                                   size_t *out_height,
                                   size_t *out_width);

/**
 * Sparse vision graph on an `height × width` patch grid.
 *
 * # Safety
 * `out` must be writable.
 */
enum AvigStatus avig_graph_svga(size_t height, size_t width, struct AvigGraph **out);

/**
 * `k` nearest neighbors of each of `n` feature rows of width `c`.
 *
 * # Safety
 * `features` must hold `n·c` values; `out` must be writable.
 */
enum AvigStatus avig_graph_knn(const double *features,
                               size_t n,
                               size_t c,
                               size_t k,
                               struct AvigGraph **out);

/**
 * # Safety
 * `graph` must come from this library; `out` must be writable.
 */
enum AvigStatus avig_graph_node_count(const struct AvigGraph *graph, size_t *out);

/**
 * Neighbors of `node` in order. `out_len` always receives the degree; if it
 * exceeds `cap` the call fails with `BufferTooSmall` and `buf` is untouched.
 *
 * # Safety
 * `buf` must hold `cap` values; `out_len` must be writable.
 */
enum AvigStatus avig_graph_neighbors(const struct AvigGraph *graph,
                                     size_t node,
                                     size_t *buf,
                                     size_t cap,
                                     size_t *out_len);

/**
 * Releases a graph. Null is ignored.
 *
 * # Safety
 * `graph` must come from this library and not be used afterwards.
 */
void avig_graph_free(struct AvigGraph *graph);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTENTION_VIG_H */
