/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef NOISEBENCH_H
#define NOISEBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum NbStatus {
  NB_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NB_NULL_POINTER = 1,
  /**
   * Bad input: config, schema, parameter or shape.
   */
  NB_INVALID_INPUT = 2,
  /**
   * A computation failed (divergence, calibration, study).
   */
  NB_RUNTIME = 3,
  /**
   * File system or parse failure.
   */
  NB_IO = 4,
  /**
   * Output buffer too small.
   */
  NB_BUFFER_TOO_SMALL = 5,
  NB_PANIC = 6,
} NbStatus;

/**
 * A parsed experiment configuration.
 */
typedef struct NbConfig NbConfig;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct NbModel NbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nb_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in
 * bytes, or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nb_last_error_message(char *buf, size_t len);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NbStatus nb_model_load(const char *path, struct NbModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`nb_model_load`] and not be used afterwards.
 */
void nb_model_free(struct NbModel *model);

/**
 * Number of input features, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nb_model_input_dim(const struct NbModel *model);

/**
 * Width of the raw output: the class count, or two values (mean and
 * log-variance) per regression target.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nb_model_output_dim(const struct NbModel *model);

/**
 * Runs the network on `rows` row-major inputs of `cols` features and
 * writes `rows * output_dim` values to `out`. Classification outputs are
 * softmax probabilities; regression outputs are raw mean and log-variance
 * pairs in normalised units.
 *
 * # Safety
 * `x` must hold `rows * cols` values and `out` must have room for
 * `out_len` values.
 */
enum NbStatus nb_model_predict(const struct NbModel *model,
                               const double *x,
                               size_t rows,
                               size_t cols,
                               double *out,
                               size_t out_len);

/**
 * Parses and validates an experiment config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NbStatus nb_config_load(const char *path, struct NbConfig **out);

/**
 * Releases a config. Null is ignored.
 *
 * # Safety
 * `config` must come from [`nb_config_load`] and not be used afterwards.
 */
void nb_config_free(struct NbConfig *config);

/**
 * Replaces the config's seed list.
 *
 * # Safety
 * `config` must be a live handle and `seeds` must hold `n` values.
 */
enum NbStatus nb_config_set_seeds(struct NbConfig *config, const uint64_t *seeds, size_t n);

/**
 * Equivalent of `noisebench train`.
 *
 * # Safety
 * `config` must be a live handle; `out_dir` a NUL-terminated string.
 */
enum NbStatus nb_train(const struct NbConfig *config, const char *out_dir, bool force);

/**
 * Equivalent of `noisebench ood`.
 *
 * # Safety
 * `config` must be a live handle; `out_dir` a NUL-terminated string.
 */
enum NbStatus nb_generate_ood(const struct NbConfig *config, const char *out_dir, bool force);

/**
 * Expected calibration error in percent of `rows` probability rows with
 * `classes` entries each.
 *
 * # Safety
 * `probs` must hold `rows * classes` values, `labels` `rows` values and
 * `out` must be writable.
 */
enum NbStatus nb_ece(const double *probs,
                     size_t rows,
                     size_t classes,
                     const uint32_t *labels,
                     size_t bins,
                     double *out);

/**
 * Tie-corrected Kendall tau between two score lists of length `n`.
 *
 * # Safety
 * `a` and `b` must hold `n` values; `out` must be writable.
 */
enum NbStatus nb_kendall_tau(const double *a, const double *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOISEBENCH_H */
