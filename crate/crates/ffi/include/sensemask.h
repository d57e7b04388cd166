#ifndef SENSEMASK_H
#define SENSEMASK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; `SM_OK` is zero.
 */
typedef enum SmStatus {
  SM_OK = 0,
  SM_NULL_POINTER = 1,
  SM_INVALID_UTF8 = 2,
  SM_BUFFER_TOO_SMALL = 3,
  SM_DIMENSION = 10,
  SM_PARAMETER = 11,
  SM_STRUCTURE = 12,
  SM_NON_FINITE = 13,
  SM_DIVERGENCE = 14,
  SM_FORMAT = 15,
  SM_CONFIG = 16,
  SM_METRIC = 17,
  SM_TRAINING = 18,
  SM_IO = 19,
  SM_PANIC = 99,
} SmStatus;

/**
 * Resolved experiment configuration.
 */
typedef struct SmConfig SmConfig;

/**
 * Binary mask with its grid shape.
 */
typedef struct SmMask SmMask;

/**
 * Frozen measurement operator.
 */
typedef struct SmOperator SmOperator;

/**
 * Held-out metrics of an evaluation.
 */
typedef struct SmMetrics {
  double nmse_db;
  double nmae_db;
  double loss;
  double false_positives;
  double false_negatives;
} SmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the message length in bytes (without the NUL); a return
 * value `>= len` means the message was truncated.
 *
 * # Safety
 * `buf` must be valid for `len` writable bytes, or null with `len == 0`.
 */
size_t sm_last_error(char *buf, size_t len);

/**
 * Parses a `key = value` config. Every field is validated here.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum SmStatus sm_config_parse(const char *text, struct SmConfig **out);

/**
 * Sets one key and revalidates; the config is unchanged on failure.
 *
 * # Safety
 * `cfg` must come from [`sm_config_parse`]; strings NUL-terminated.
 */
enum SmStatus sm_config_set(struct SmConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must come from [`sm_config_parse`] or be null.
 */
void sm_config_free(struct SmConfig *cfg);

/**
 * Trains per `cfg`, writes the run artifacts under `out_dir` and returns
 * the learned mask.
 *
 * # Safety
 * Pointers must be valid; `out_dir` NUL-terminated.
 */
enum SmStatus sm_train(const struct SmConfig *cfg, const char *out_dir, struct SmMask **mask_out);

/**
 * Runs the configured discrete baseline and returns its final mask.
 *
 * # Safety
 * Pointers must be valid; `out_dir` NUL-terminated.
 */
enum SmStatus sm_baseline(const struct SmConfig *cfg,
                          const char *out_dir,
                          struct SmMask **mask_out);

/**
 * Evaluates `mask` (or a random mask when null) on the held-out set.
 *
 * # Safety
 * `cfg` and `metrics` must be valid; `mask` valid or null.
 */
enum SmStatus sm_evaluate(const struct SmConfig *cfg,
                          const struct SmMask *mask,
                          const char *out_dir,
                          struct SmMetrics *metrics);

/**
 * Reads a binary GLDM mask file.
 *
 * # Safety
 * `path` NUL-terminated; `out` valid.
 */
enum SmStatus sm_mask_read(const char *path, struct SmMask **out);

/**
 * Builds a mask from `rows * cols` bytes, each 0 or 1.
 *
 * # Safety
 * `bits` must hold `rows * cols` readable bytes; `out` valid.
 */
enum SmStatus sm_mask_new(size_t rows, size_t cols, const uint8_t *bits, struct SmMask **out);

/**
 * # Safety
 * `mask` must be valid; `path` NUL-terminated.
 */
enum SmStatus sm_mask_write(const struct SmMask *mask, const char *path);

/**
 * Grid shape of a mask.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SmStatus sm_mask_shape(const struct SmMask *mask, size_t *rows, size_t *cols);

/**
 * Copies the row-major bits into `buf`, which needs `rows * cols` bytes.
 *
 * # Safety
 * `buf` must be valid for `len` writable bytes.
 */
enum SmStatus sm_mask_bits(const struct SmMask *mask, uint8_t *buf, size_t len);

/**
 * # Safety
 * `mask` must come from this library or be null.
 */
void sm_mask_free(struct SmMask *mask);

/**
 * Freezes `mask` into the configured operator family at `scale`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SmStatus sm_operator_new(const struct SmConfig *cfg,
                              const struct SmMask *mask,
                              double scale,
                              struct SmOperator **out);

/**
 * Signal and measurement lengths of an operator.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SmStatus sm_operator_shape(const struct SmOperator *op, size_t *n, size_t *m);

/**
 * `y = Φ x`.
 *
 * # Safety
 * `x` must hold `n` doubles and `y` room for `m`, per [`sm_operator_shape`].
 */
enum SmStatus sm_operator_apply(const struct SmOperator *op,
                                const double *x,
                                size_t n,
                                double *y,
                                size_t m);

/**
 * `x = Φᵀ y`.
 *
 * # Safety
 * `y` must hold `m` doubles and `x` room for `n`.
 */
enum SmStatus sm_operator_adjoint(const struct SmOperator *op,
                                  const double *y,
                                  size_t m,
                                  double *x,
                                  size_t n);

/**
 * # Safety
 * `op` must come from [`sm_operator_new`] or be null.
 */
void sm_operator_free(struct SmOperator *op);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SENSEMASK_H */
