#ifndef DVQA_MINI_H
#define DVQA_MINI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvqaStatus {
  DVQA_STATUS_OK = 0,
  DVQA_STATUS_NULL_ARGUMENT = 1,
  DVQA_STATUS_SHAPE = 2,
  DVQA_STATUS_CONFIG = 3,
  DVQA_STATUS_DATA = 4,
  DVQA_STATUS_STRUCTURE = 5,
  DVQA_STATUS_NUMERICAL = 6,
  DVQA_STATUS_UNDEFINED = 7,
  DVQA_STATUS_IO = 8,
  DVQA_STATUS_PANIC = 9,
} DvqaStatus;

// Loaded network; only reachable through a pointer.
typedef struct DvqaModel DvqaModel;

typedef struct DvqaFTest {
  double statistic;
  uint64_t df_a;
  uint64_t df_b;
  double p_value;
  // +1 when `a` has the significantly smaller variance, -1 when larger.
  int32_t verdict;
} DvqaFTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// success. Valid until the next call on the same thread.
const char *dvqa_last_error(void);

// Loads a checkpoint file. On success `*out_model` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out_model` a valid pointer.
enum DvqaStatus dvqa_model_load(const char *path, struct DvqaModel **out_model);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`dvqa_model_load`] and not be freed twice.
void dvqa_model_free(struct DvqaModel *model);

// Patch geometry expected by the model, channels-first.
//
// # Safety
// All pointers must be valid.
enum DvqaStatus dvqa_model_geometry(const struct DvqaModel *model,
                                    size_t *channels,
                                    size_t *height,
                                    size_t *width);

// Parameter count, nonzero parameter count and forward FLOPs per branch.
//
// # Safety
// All pointers must be valid.
enum DvqaStatus dvqa_model_counts(const struct DvqaModel *model,
                                  uint64_t *params,
                                  uint64_t *nonzero,
                                  uint64_t *flops);

// Scores `count` reference/distorted patch pairs. Each buffer holds
// `count * C * H * W` floats in `[N,C,H,W]` order; `scores` receives
// `count` values.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum DvqaStatus dvqa_model_score(const struct DvqaModel *model,
                                 const float *reference,
                                 const float *distorted,
                                 size_t count,
                                 double *scores);

// Probability that pair one (`r1`, `d1`) has the higher quality than pair
// two. Each buffer holds one `C * H * W` patch.
//
// # Safety
// Buffers must be valid for one patch each.
enum DvqaStatus dvqa_model_prefer(const struct DvqaModel *model,
                                  const float *r1,
                                  const float *d1,
                                  const float *r2,
                                  const float *d2,
                                  double *probability);

// Spearman rank-order correlation of two length-`n` arrays.
//
// # Safety
// `a` and `b` must hold `n` values; `result` must be valid.
enum DvqaStatus dvqa_srocc(const double *a, const double *b, size_t n, double *result);

// Two-sided variance-ratio F-test of residual arrays `a` and `b`.
//
// # Safety
// `a` and `b` must hold `na` and `nb` values; `result` must be valid.
enum DvqaStatus dvqa_f_test(const double *a,
                            size_t na,
                            const double *b,
                            size_t nb,
                            double confidence,
                            struct DvqaFTest *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVQA_MINI_H */
