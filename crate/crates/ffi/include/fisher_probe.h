#ifndef FISHER_PROBE_H
#define FISHER_PROBE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_ARGUMENT = 1,
  FP_STATUS_INVALID_UTF8 = 2,
  FP_STATUS_IO = 3,
  FP_STATUS_PARSE = 4,
  FP_STATUS_INVALID_INPUT = 5,
  FP_STATUS_NUMERIC = 6,
  FP_STATUS_BUFFER_TOO_SMALL = 7,
  FP_STATUS_PANIC = 8,
} FpStatus;

// A loaded classifier and its embedding table.
typedef struct FpModel FpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into this library on the same thread.
const char *fp_last_error_message(void);

// Loads a checkpoint. `embeddings` may be NULL for point models and is
// required for text models. On success `*out` owns a new handle.
//
// # Safety
// `checkpoint` and non-NULL `embeddings` must be NUL-terminated strings;
// `out` must be a valid pointer.
enum FpStatus fp_model_load(const char *checkpoint, const char *embeddings, struct FpModel **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from [`fp_model_load`] and not be used afterwards.
void fp_model_free(struct FpModel *model);

// # Safety
// `model` and `out` must be valid pointers.
enum FpStatus fp_model_num_classes(const struct FpModel *model, size_t *out);

// Scores a text. `prediction` and `probs` may be NULL; a non-NULL
// `probs` must hold at least as many values as the model has classes.
//
// # Safety
// `model` must be a live handle, `text` a NUL-terminated string and
// `probs` valid for `probs_len` writes.
enum FpStatus fp_score_text(const struct FpModel *model,
                            const char *text,
                            double *lambda_max_out,
                            size_t *prediction,
                            double *probs,
                            size_t probs_len);

// Scores a feature vector of length `len`. Output arguments as for
// [`fp_score_text`].
//
// # Safety
// `point` must be valid for `len` reads; other pointers as for
// [`fp_score_text`].
enum FpStatus fp_score_point(const struct FpModel *model,
                             const double *point,
                             size_t len,
                             double *lambda_max_out,
                             size_t *prediction,
                             double *probs,
                             size_t probs_len);

// Percentage overlap of two samples' histograms over a shared range.
//
// # Safety
// `a` and `b` must be valid for `a_len` and `b_len` reads; `out_percent`
// must be a valid pointer.
enum FpStatus fp_histogram_overlap(const double *a,
                                   size_t a_len,
                                   const double *b,
                                   size_t b_len,
                                   size_t bins,
                                   double *out_percent);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FISHER_PROBE_H */
