/* C interface of the qki descriptor library. Regenerate with:
 *   cargo build -p qki-ffi --features generate-header
 */

#ifndef QKI_H
#define QKI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on any breaking change to this interface.
 */
#define QKI_ABI_VERSION 1

/**
 * Result of every fallible call. Codes 2-4 mirror the CLI exit codes.
 */
typedef enum QkiStatus {
  QKI_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  QKI_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration value (for example a non-positive temperature).
   */
  QKI_STATUS_CONFIG = 2,
  /**
   * Bad file, shape mismatch, or any other data problem.
   */
  QKI_STATUS_DATA = 3,
  /**
   * Non-finite arithmetic.
   */
  QKI_STATUS_NUMERIC = 4,
  /**
   * A path or string argument was not valid UTF-8.
   */
  QKI_STATUS_UTF8 = 5,
  /**
   * Unexpected internal failure; the library state is still sound.
   */
  QKI_STATUS_INTERNAL = 6,
} QkiStatus;

/**
 * A loaded encoder checkpoint: the trained parameters plus the fixed
 * baseline featurizer they were saved with.
 */
typedef struct QkiEncoder QkiEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The interface revision this library was built with.
 */
uint32_t qki_abi_version(void);

/**
 * The failure text of the most recent non-`QKI_STATUS_OK` call on this
 * thread. The pointer stays valid until the next failing call on the same
 * thread; the string is empty when nothing has failed yet.
 */
const char *qki_last_error_message(void);

/**
 * Load an encoder checkpoint (a `.qkcp` file written by training or by
 * `save_encoder`). On success `*out` owns the handle; release it with
 * `qki_encoder_free`.
 */
enum QkiStatus qki_encoder_load(const char *path, struct QkiEncoder **out);

/**
 * Release a handle. Null is accepted and ignored.
 */
void qki_encoder_free(struct QkiEncoder *enc);

/**
 * Input dimension the encoder expects, or 0 for a null handle.
 */
size_t qki_encoder_input_dim(const struct QkiEncoder *enc);

/**
 * Descriptor dimension the encoder produces, or 0 for a null handle.
 */
size_t qki_encoder_descriptor_dim(const struct QkiEncoder *enc);

/**
 * 0 for a query encoder, 1 for a key encoder, -1 for a null handle.
 */
int32_t qki_encoder_role(const struct QkiEncoder *enc);

/**
 * Descriptor of a single input vector. `input_len` must equal
 * `qki_encoder_input_dim`, `out_len` must equal
 * `qki_encoder_descriptor_dim`.
 */
enum QkiStatus qki_encoder_describe(const struct QkiEncoder *enc,
                                    const double *input,
                                    size_t input_len,
                                    double *out,
                                    size_t out_len);

/**
 * Descriptors of `n_rows` row-major input vectors of `input_dim` values
 * each. `out` must hold `n_rows * qki_encoder_descriptor_dim` values and is
 * written row-major. A zero-row batch succeeds and writes nothing.
 */
enum QkiStatus qki_encoder_describe_batch(const struct QkiEncoder *enc,
                                          const double *inputs,
                                          size_t n_rows,
                                          size_t input_dim,
                                          double *out,
                                          size_t out_len);

/**
 * Match probability exp(-||a - b||^2 / tau) of two descriptors of length
 * `len`, written to `*out`.
 */
enum QkiStatus qki_pair_score(const double *a,
                              const double *b,
                              size_t len,
                              double tau,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QKI_H */
