#ifndef MOE_UQ_H
#define MOE_UQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome classes, numbered like the CLI exit codes.
 */
typedef enum MoeUqStatus {
  MOE_UQ_STATUS_OK = 0,
  /**
   * Null pointer, wrong buffer length or missing gate.
   */
  MOE_UQ_STATUS_USAGE = 2,
  MOE_UQ_STATUS_VALIDATION = 3,
  MOE_UQ_STATUS_IO = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  MOE_UQ_STATUS_INTERNAL = 5,
} MoeUqStatus;

typedef enum MoeUqMeasure {
  MOE_UQ_MEASURE_PREDICTIVE_ENTROPY = 0,
  MOE_UQ_MEASURE_MUTUAL_INFORMATION = 1,
  MOE_UQ_MEASURE_EXPERT_VARIANCE = 2,
  MOE_UQ_MEASURE_GATE_ENTROPY = 3,
} MoeUqMeasure;

typedef enum MoeUqMode {
  MOE_UQ_MODE_STACKED = 0,
  MOE_UQ_MODE_WEIGHTED = 1,
} MoeUqMode;

/**
 * Opaque expert stack with an optional gate.
 */
typedef struct MoeUqStack MoeUqStack;

typedef struct MoeUqCalibration {
  double ece;
  double mce;
  double brier;
  double nll;
  uint64_t n_pixels;
} MoeUqCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *moe_uq_version(void);

/**
 * Message of the last failed call on this thread, `"Kind: detail"`, or an
 * empty string after a successful call. Valid until the next call.
 */
const char *moe_uq_last_error(void);

/**
 * Builds a stack from `num_experts * height * width * num_classes` values.
 * With `renormalize` set, pixels that do not sum to one are rescaled
 * instead of rejected.
 *
 * # Safety
 * `data` must point to that many readable doubles and `out` must be writable.
 */
enum MoeUqStatus moe_uq_stack_new(const double *data,
                                  size_t num_experts,
                                  size_t height,
                                  size_t width,
                                  size_t num_classes,
                                  bool renormalize,
                                  struct MoeUqStack **out);

/**
 * # Safety
 * `stack` must come from [`moe_uq_stack_new`] and not be used afterwards.
 */
void moe_uq_stack_free(struct MoeUqStack *stack);

/**
 * One weight per expert, summing to one.
 *
 * # Safety
 * `weights` must point to `num_experts` readable doubles.
 */
enum MoeUqStatus moe_uq_stack_set_simple_gate(struct MoeUqStack *stack,
                                              const double *weights,
                                              size_t num_experts);

/**
 * `[num_experts, num_classes]` weights, each class column summing to one.
 *
 * # Safety
 * `weights` must point to `num_experts * num_classes` readable doubles.
 */
enum MoeUqStatus moe_uq_stack_set_classwise_gate(struct MoeUqStack *stack,
                                                 const double *weights,
                                                 size_t num_experts,
                                                 size_t num_classes);

/**
 * Writes the fused `[H, W, C]` prediction.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum MoeUqStatus moe_uq_combine(const struct MoeUqStack *stack, double *out, size_t len);

/**
 * Writes an `[H, W]` uncertainty map and, when `normalizer` is non-null, its
 * theoretical maximum. `mode` only affects entropy and mutual information;
 * expert variance uses the class mean.
 *
 * # Safety
 * `out` must point to `len` writable doubles; `normalizer` is null or writable.
 */
enum MoeUqStatus moe_uq_uncertainty(const struct MoeUqStack *stack,
                                    enum MoeUqMeasure measure,
                                    enum MoeUqMode mode,
                                    double *out,
                                    size_t len,
                                    double *normalizer);

/**
 * # Safety
 * `out` must be writable.
 */
enum MoeUqStatus moe_uq_gate_entropy(const struct MoeUqStack *stack, double *out);

/**
 * ECE, MCE, Brier and NLL of an `[H, W, C]` prediction with per-pixel
 * confidence in `[0, 1]`.
 *
 * # Safety
 * `pred`, `confidence` and `labels` must hold `H*W*C`, `H*W` and `H*W`
 * values; `out` must be writable.
 */
enum MoeUqStatus moe_uq_calibration(const double *pred,
                                    const double *confidence,
                                    const uint32_t *labels,
                                    size_t height,
                                    size_t width,
                                    size_t num_classes,
                                    uint32_t ignore_index,
                                    size_t num_bins,
                                    struct MoeUqCalibration *out);

/**
 * Mean IoU of the argmax of an `[H, W, C]` prediction.
 *
 * # Safety
 * `pred` and `labels` must hold `H*W*C` and `H*W` values; `out` must be writable.
 */
enum MoeUqStatus moe_uq_miou(const double *pred,
                             const uint32_t *labels,
                             size_t height,
                             size_t width,
                             size_t num_classes,
                             uint32_t ignore_index,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOE_UQ_H */
