#ifndef TRANSNET_H
#define TRANSNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TnetStatus {
  TNET_STATUS_OK = 0,
  TNET_STATUS_NULL_POINTER = 1,
  TNET_STATUS_INVALID_ARGUMENT = 2,
  TNET_STATUS_SHAPE = 3,
  TNET_STATUS_FORMAT = 4,
  TNET_STATUS_IO = 5,
  TNET_STATUS_PANIC = 6,
} TnetStatus;

/**
 * Opaque model handle.
 */
typedef struct TnetModel TnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *tnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tnet_version(void);

/**
 * Loads a binary or JSON checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TnetStatus tnet_model_load(const char *path, struct TnetModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tnet_model_free(struct TnetModel *model);

/**
 * Writes the model as a binary checkpoint, or JSON when `json` is true.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TnetStatus tnet_model_save(const struct TnetModel *model, const char *path, bool json);

/**
 * Number of heads, classes, input channels and parameters. Any output
 * pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum TnetStatus tnet_model_info(const struct TnetModel *model,
                                size_t *num_heads,
                                size_t *num_classes,
                                size_t *in_channels,
                                size_t *num_parameters);

/**
 * Name of head `head`'s transformation (such as `r1` or `mr2`) written as a
 * NUL-terminated string into `buf` of `len` bytes.
 *
 * # Safety
 * `model` must be a live handle and `buf` writable for `len` bytes.
 */
enum TnetStatus tnet_model_head_transform(const struct TnetModel *model,
                                          size_t head,
                                          char *buf,
                                          size_t len);

/**
 * Logits of head `head` on its transformation of the `channels×size×size`
 * row-major input. Writes `num_classes` values to `out`.
 *
 * # Safety
 * `input` must hold `channels·size·size` values and `out` `out_len`.
 */
enum TnetStatus tnet_model_forward_head(const struct TnetModel *model,
                                        size_t head,
                                        const double *input,
                                        size_t channels,
                                        size_t size,
                                        double *out,
                                        size_t out_len);

/**
 * Heads combined as configured in the checkpoint (mean logits by default).
 *
 * # Safety
 * As [`tnet_model_forward_head`].
 */
enum TnetStatus tnet_model_forward_full(const struct TnetModel *model,
                                        const double *input,
                                        size_t channels,
                                        size_t size,
                                        double *out,
                                        size_t out_len);

/**
 * Mean of the full model on the input and on its horizontal flip.
 *
 * # Safety
 * As [`tnet_model_forward_head`].
 */
enum TnetStatus tnet_model_predict_flip_averaged(const struct TnetModel *model,
                                                 const double *input,
                                                 size_t channels,
                                                 size_t size,
                                                 double *out,
                                                 size_t out_len);

/**
 * New single-head model keeping head `keep`. With `compile` its
 * transformation is folded into the kernels.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum TnetStatus tnet_model_prune(const struct TnetModel *model,
                                 size_t keep,
                                 bool compile,
                                 struct TnetModel **out);

/**
 * New model whose output on `x` equals the original's on `t(x)` for the
 * named dihedral element `t`; the head transformations are unchanged.
 *
 * # Safety
 * `model` must be a live handle, `element` a NUL-terminated string and
 * `out` writable.
 */
enum TnetStatus tnet_model_compile_transformation(const struct TnetModel *model,
                                                  const char *element,
                                                  struct TnetModel **out);

/**
 * Score of one `channels×k×k` kernel under group `"c4"` or `"d4"` with
 * metric `"norm"`, `"pearson"` or `"cosine"`. `*defined` is false when the
 * metric is undefined for the kernel, and `*score` is then NaN.
 *
 * # Safety
 * `kernel` must hold `channels·k·k` values; outputs must be writable.
 */
enum TnetStatus tnet_invariance_score(const double *kernel,
                                      size_t channels,
                                      size_t k,
                                      const char *group,
                                      const char *metric,
                                      bool normalized,
                                      double *score,
                                      bool *defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSNET_H */
