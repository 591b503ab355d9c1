#ifndef SLEEPYCO_H
#define SLEEPYCO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SleepycoStatus {
  SLEEPYCO_STATUS_OK = 0,
  SLEEPYCO_STATUS_NULL_POINTER = 1,
  SLEEPYCO_STATUS_INVALID_ARGUMENT = 2,
  SLEEPYCO_STATUS_SHAPE_MISMATCH = 3,
  SLEEPYCO_STATUS_IO = 4,
  SLEEPYCO_STATUS_CHECKPOINT = 5,
  SLEEPYCO_STATUS_CONFIG = 6,
  SLEEPYCO_STATUS_DATA = 7,
  SLEEPYCO_STATUS_NON_FINITE = 8,
  SLEEPYCO_STATUS_PANIC = 9,
} SleepycoStatus;

/**
 * A model ready for prediction.
 */
typedef struct SleepycoModel SleepycoModel;

/**
 * A decoded signal channel.
 */
typedef struct SleepycoSignal SleepycoSignal;

typedef struct SleepycoMetrics {
  double acc;
  double mf1;
  double kappa;
  /**
   * Stage order W, N1, N2, N3, REM.
   */
  double per_class_f1[5];
  double per_class_precision[5];
  double per_class_recall[5];
  double p_e;
} SleepycoMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sleepyco_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * success. Valid until the next call on the same thread.
 */
const char *sleepyco_last_error(void);

/**
 * Freshly initialized model. `config_json` is a model configuration
 * object (NULL for defaults).
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum SleepycoStatus sleepyco_model_new(const char *config_json,
                                       uint64_t seed,
                                       struct SleepycoModel **out);

/**
 * Model with the sequence weights of a checkpoint manifest at `path`.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `path` is a
 * NUL-terminated string; `out` is writable.
 */
enum SleepycoStatus sleepyco_model_load(const char *config_json,
                                        const char *path,
                                        struct SleepycoModel **out);

/**
 * Samples per input sequence: 3000 times the sequence length.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum SleepycoStatus sleepyco_model_sequence_samples(const struct SleepycoModel *model, size_t *out);

/**
 * Stage of the last epoch of each of `n_sequences` back-to-back
 * sequences (0 = W, 1 = N1, 2 = N2, 3 = N3, 4 = REM). Running
 * normalization statistics must be present in the model.
 *
 * # Safety
 * `model` is a live handle; `samples` holds `n_sequences` times
 * [`sleepyco_model_sequence_samples`] values; `stages` has room for
 * `n_sequences` entries.
 */
enum SleepycoStatus sleepyco_model_predict(const struct SleepycoModel *model,
                                           const double *samples,
                                           size_t n_sequences,
                                           uint32_t *stages);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` is NULL or a handle not yet freed.
 */
void sleepyco_model_free(struct SleepycoModel *model);

/**
 * Agreement metrics of a row-major 5×5 confusion matrix (rows actual).
 *
 * # Safety
 * `counts` holds 25 values; `out` is writable.
 */
enum SleepycoStatus sleepyco_metrics(const uint64_t *counts, struct SleepycoMetrics *out);

/**
 * Supervised contrastive loss of `n` row-major `d`-dimensional
 * embeddings, summed over anchors; `no_positive` receives the number of
 * anchors that had no positive (may be NULL).
 *
 * # Safety
 * `z` holds `n * d` values, `labels` holds `n`; `loss` is writable.
 */
enum SleepycoStatus sleepyco_supcon_loss(const double *z,
                                         size_t n,
                                         size_t d,
                                         const uint32_t *labels,
                                         double tau,
                                         double *loss,
                                         size_t *no_positive);

/**
 * Zero-phase band-stop filter of `n` samples at `fs` Hz removing
 * `[lower_hz, lower_hz + width_hz]`; `out` may alias `x`.
 *
 * # Safety
 * `x` and `out` hold `n` values.
 */
enum SleepycoStatus sleepyco_band_stop(const double *x,
                                       size_t n,
                                       double lower_hz,
                                       double width_hz,
                                       double fs,
                                       double *out);

/**
 * Decodes channel `channel` of an EDF file held in memory.
 *
 * # Safety
 * `bytes` holds `len` bytes; `channel` is NUL-terminated; `out` is
 * writable.
 */
enum SleepycoStatus sleepyco_edf_read(const uint8_t *bytes,
                                      size_t len,
                                      const char *channel,
                                      struct SleepycoSignal **out);

/**
 * # Safety
 * `signal` is a live handle; `out` is writable.
 */
enum SleepycoStatus sleepyco_signal_len(const struct SleepycoSignal *signal, size_t *out);

/**
 * # Safety
 * `signal` is a live handle; `out` is writable.
 */
enum SleepycoStatus sleepyco_signal_sample_rate(const struct SleepycoSignal *signal, double *out);

/**
 * Copies the physical samples into `out`, which must hold exactly
 * [`sleepyco_signal_len`] values.
 *
 * # Safety
 * `signal` is a live handle; `out` holds `cap` values.
 */
enum SleepycoStatus sleepyco_signal_copy(const struct SleepycoSignal *signal,
                                         double *out,
                                         size_t cap);

/**
 * Releases a signal; NULL is ignored.
 *
 * # Safety
 * `signal` is NULL or a handle not yet freed.
 */
void sleepyco_signal_free(struct SleepycoSignal *signal);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SLEEPYCO_H */
