#ifndef GMAP_H
#define GMAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped whenever a signature or status value changes.
 */
#define GMAP_ABI_VERSION 1

typedef enum GmapStatus {
  GMAP_STATUS_OK = 0,
  GMAP_STATUS_NULL_ARGUMENT = 1,
  GMAP_STATUS_INVALID_UTF8 = 2,
  GMAP_STATUS_NOT_FOUND = 3,
  GMAP_STATUS_IO = 4,
  GMAP_STATUS_CHECKPOINT = 5,
  GMAP_STATUS_CORRUPT = 6,
  GMAP_STATUS_CONFIG = 7,
  GMAP_STATUS_INPUT = 8,
  GMAP_STATUS_NUMERIC = 9,
  GMAP_STATUS_BUFFER_TOO_SMALL = 10,
  GMAP_STATUS_PANIC = 11,
} GmapStatus;

/**
 * Opaque model handle.
 */
typedef struct GmapModel GmapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI version of this library, [`GMAP_ABI_VERSION`].
 */
uint32_t gmap_abi_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gmap_last_error(void);

/**
 * Loads a checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GmapStatus gmap_model_load(const char *path, struct GmapModel **out);

/**
 * Writes the model to `path` in checkpoint format.
 *
 * # Safety
 * `model` must come from [`gmap_model_load`]; `path` must be NUL-terminated.
 */
enum GmapStatus gmap_model_save(const struct GmapModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`gmap_model_load`] and not be used afterwards.
 */
void gmap_model_free(struct GmapModel *model);

/**
 * Vocabulary size, maximum sequence length and class count (0 without a
 * head).
 *
 * # Safety
 * `model` must be a live handle; each out pointer may be null to skip it.
 */
enum GmapStatus gmap_model_dims(const struct GmapModel *model,
                                size_t *vocab_size,
                                size_t *max_seq_len,
                                size_t *num_classes);

/**
 * Parameter fingerprint, stable across save and load.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum GmapStatus gmap_model_fingerprint(const struct GmapModel *model, uint64_t *out);

/**
 * Trainable and frozen scalar counts.
 *
 * # Safety
 * `model` must be a live handle; out pointers may be null.
 */
enum GmapStatus gmap_model_census(const struct GmapModel *model, size_t *trainable, size_t *frozen);

/**
 * Encodes whitespace-separated `text` as `[CLS] … [SEP]` ids, truncated to
 * the model's maximum length. `*len` receives the id count; if it exceeds
 * `capacity` nothing is written and `GMAP_STATUS_BUFFER_TOO_SMALL` is
 * returned.
 *
 * # Safety
 * `text` must be NUL-terminated; `ids` must hold `capacity` elements.
 */
enum GmapStatus gmap_model_encode(const struct GmapModel *model,
                                  const char *text,
                                  uint32_t *ids,
                                  size_t capacity,
                                  size_t *len);

/**
 * Class probabilities for one id sequence. `probs` must hold the model's
 * class count; `*label` receives the argmax.
 *
 * # Safety
 * `ids` must hold `len` elements, `probs` `probs_len` elements.
 */
enum GmapStatus gmap_model_classify(const struct GmapModel *model,
                                    const uint32_t *ids,
                                    size_t len,
                                    double *probs,
                                    size_t probs_len,
                                    size_t *label);

/**
 * Held-out MLM loss over a corpus file (one document per line) with the
 * fixed evaluation masking. A nonzero `through_general` evaluates the
 * general encoder alone.
 *
 * # Safety
 * `corpus_path` must be NUL-terminated and `out` writable.
 */
enum GmapStatus gmap_model_mlm_loss(const struct GmapModel *model,
                                    const char *corpus_path,
                                    double mask_prob,
                                    int32_t through_general,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMAP_H */
