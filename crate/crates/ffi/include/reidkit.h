#ifndef REIDKIT_H
#define REIDKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RkStatus {
  RK_STATUS_OK = 0,
  // Validation or domain error.
  RK_STATUS_DOMAIN = 1,
  // Malformed input text or bytes.
  RK_STATUS_INPUT = 2,
  RK_STATUS_NULL_POINTER = 3,
  // The caller's buffer is too small; the required size was reported.
  RK_STATUS_BUFFER_TOO_SMALL = 4,
  RK_STATUS_PANIC = 5,
} RkStatus;

typedef enum RkEmphasis {
  RK_EMPHASIS_TOWARD_MAX = 0,
  RK_EMPHASIS_TOWARD_MIN = 1,
} RkEmphasis;

typedef struct RkEmbeddingTable RkEmbeddingTable;

typedef struct RkMask RkMask;

typedef struct RkReport RkReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rk_version(void);

// Length of the last error message in bytes, excluding the NUL; 0 if none.
size_t rk_last_error_length(void);

// # Safety
// `buf` must point to `len` writable bytes; `needed` may be null.
enum RkStatus rk_last_error_message(char *buf, size_t len, size_t *needed);

// Parses a `WxH:r0,r1,...` mask string.
//
// # Safety
// `rle` must be a NUL-terminated string and `mask` a valid out pointer.
enum RkStatus rk_mask_from_rle(const char *rle, struct RkMask **mask);

// # Safety
// `mask` must come from [`rk_mask_from_rle`] and not be used afterwards.
void rk_mask_free(struct RkMask *mask);

// # Safety
// Pointers must be valid.
enum RkStatus rk_mask_dims(const struct RkMask *mask, uint32_t *width, uint32_t *height);

// # Safety
// Pointers must be valid.
enum RkStatus rk_mask_foreground_count(const struct RkMask *mask, uint64_t *count);

// # Safety
// Pointers must be valid.
enum RkStatus rk_mask_iou(const struct RkMask *a, const struct RkMask *b, double *iou);

// Tight box `[x, y, w, h]` of the foreground; a domain error for empty masks.
//
// # Safety
// `bbox` must point to 4 writable doubles.
enum RkStatus rk_mask_bbox(const struct RkMask *mask, double *bbox);

// # Safety
// `buf` must point to `len` writable bytes; `needed` may be null.
enum RkStatus rk_mask_to_rle(const struct RkMask *mask, char *buf, size_t len, size_t *needed);

// Cosine distance of two `n`-vectors; gradient outputs may be null.
//
// # Safety
// `u`, `v` (and non-null gradients) must hold `n` doubles.
enum RkStatus rk_cosine_distance(const double *u,
                                 const double *v,
                                 size_t n,
                                 double *distance,
                                 double *grad_u,
                                 double *grad_v);

// Softmax weights over `n` distances.
//
// # Safety
// `distances` and `weights` must hold `n` doubles.
enum RkStatus rk_soft_weights(const double *distances,
                              size_t n,
                              enum RkEmphasis emphasis,
                              double *weights);

// CIoU loss of two `[x, y, w, h]` boxes; `grad` (4 doubles, w.r.t. `pred`) may be null.
//
// # Safety
// `pred` and `target` must hold 4 doubles.
enum RkStatus rk_ciou_loss(const double *pred, const double *target, double *value, double *grad);

// Average precision of a ranked relevance list (non-zero = relevant).
//
// # Safety
// `relevance` must hold `n` bytes.
enum RkStatus rk_average_precision(const uint8_t *relevance,
                                   size_t n,
                                   size_t num_positives,
                                   double *ap);

// Loads an embedding table from binary or JSON-Lines bytes.
//
// # Safety
// `bytes` must hold `len` bytes.
enum RkStatus rk_table_from_bytes(const uint8_t *bytes,
                                  size_t len,
                                  struct RkEmbeddingTable **table);

// # Safety
// `table` must come from [`rk_table_from_bytes`] and not be used afterwards.
void rk_table_free(struct RkEmbeddingTable *table);

// Entry count and vector dimension.
//
// # Safety
// Pointers must be valid.
enum RkStatus rk_table_shape(const struct RkEmbeddingTable *table, size_t *entries, size_t *dim);

// Scores predictions JSON-Lines against a manifest and annotation store, all
// given as text. `gallery` is a comma-separated list of configurations, or
// null/empty for all.
//
// # Safety
// String arguments must be NUL-terminated; `report` must be a valid out pointer.
enum RkStatus rk_evaluate(const char *manifest_json,
                          const char *predictions_jsonl,
                          const char *annotations_jsonl,
                          const char *gallery,
                          struct RkReport **report);

// Runs the retrieval protocol with `policy` (`provider` or `threshold:<theta>`).
//
// # Safety
// As [`rk_evaluate`]; `table` must be a live handle.
enum RkStatus rk_retrieve(const char *manifest_json,
                          const struct RkEmbeddingTable *table,
                          const char *annotations_jsonl,
                          const char *policy,
                          const char *gallery,
                          struct RkReport **report);

// # Safety
// `report` must come from [`rk_evaluate`] or [`rk_retrieve`] and not be used afterwards.
void rk_report_free(struct RkReport *report);

// Headline numbers for one gallery configuration. `top_k` must be 1, 5 or 10.
//
// # Safety
// Pointers must be valid; `gallery` NUL-terminated.
enum RkStatus rk_report_scores(const struct RkReport *report,
                               const char *gallery,
                               size_t top_k,
                               double *map,
                               double *top,
                               double *g_iou,
                               double *c_iou);

// Canonical JSON of every gallery report.
//
// # Safety
// `buf` must point to `len` writable bytes; `needed` may be null.
enum RkStatus rk_report_to_json(const struct RkReport *report,
                                char *buf,
                                size_t len,
                                size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REIDKIT_H */
