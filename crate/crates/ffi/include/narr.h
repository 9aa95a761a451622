#ifndef NARR_H
#define NARR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NarrStatus {
  NARR_STATUS_OK = 0,
  NARR_STATUS_NULL_POINTER = 1,
  NARR_STATUS_INVALID_CONFIG = 2,
  NARR_STATUS_NUMERIC = 3,
  NARR_STATUS_CONSTRAINT = 4,
  NARR_STATUS_DIVERGED = 5,
  NARR_STATUS_IO = 6,
  NARR_STATUS_INTERNAL = 7,
} NarrStatus;

typedef enum NarrMethod {
  NARR_METHOD_NARR = 0,
  NARR_METHOD_MINE = 1,
} NarrMethod;

typedef enum NarrChannelKind {
  NARR_CHANNEL_KIND_AWGN_MAC = 0,
  NARR_CHANNEL_KIND_OI_MAC = 1,
  NARR_CHANNEL_KIND_P2P_AWGN = 2,
} NarrChannelKind;

/**
 * Opaque training session.
 */
typedef struct NarrTrainer NarrTrainer;

typedef struct NarrTrainConfig {
  size_t batch_size;
  size_t max_iters;
  double lr_narr;
  double lr_nit;
  double alpha;
  size_t bins;
  size_t eval_every;
  size_t eval_samples;
  size_t convergence_window;
  double convergence_tol;
  uint64_t seed;
  enum NarrMethod method;
  double weight_r1;
  double weight_r2;
  double weight_rsum;
} NarrTrainConfig;

/**
 * Rate estimates in nats.
 */
typedef struct NarrRates {
  double r1;
  double r2;
  double rsum;
} NarrRates;

/**
 * Channel parameters; fields the kind does not use are ignored.
 */
typedef struct NarrChannelParams {
  enum NarrChannelKind kind;
  double sigma2;
  /**
   * Average-power limits (awgn_mac; p2p uses `p1`).
   */
  double p1;
  double p2;
  /**
   * Peak limits (oi_mac).
   */
  double a1;
  double a2;
  double mean_ratio;
} NarrChannelParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *narr_last_error_message(void);

/**
 * Owned copy of the last error message (NULL if none); release it with
 * [`narr_string_free`].
 */
char *narr_last_error_copy(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void narr_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *narr_version(void);

/**
 * Fills `out` with the default training configuration.
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one config.
 */
enum NarrStatus narr_train_config_default(struct NarrTrainConfig *out);

/**
 * Closed-form AWGN MAC pentagon corners in nats.
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one `NarrRates`.
 */
enum NarrStatus narr_awgn_mac_capacity(double p1, double p2, double sigma2, struct NarrRates *out);

/**
 * Histogram-based upper bound on `D(P‖Q)` for `n × dims` row-major samples
 * `p` and `m × dims` samples `q` (`dims` is 1 or 2).
 *
 * # Safety
 * `p` and `q` must point to `n·dims` and `m·dims` readable doubles, and
 * `out` to one writable double.
 */
enum NarrStatus narr_kl_upper_bound_hist(const double *p,
                                         size_t n,
                                         const double *q,
                                         size_t m,
                                         size_t dims,
                                         size_t bins,
                                         double *out);

/**
 * Trains to completion and writes the final estimate. `iterations` and
 * `converged` may be NULL.
 *
 * # Safety
 * `channel` and `config` must point to valid structs; `out` to writable
 * memory; the optional outputs must be NULL or writable.
 */
enum NarrStatus narr_run(const struct NarrChannelParams *channel,
                         const struct NarrTrainConfig *config,
                         struct NarrRates *out,
                         size_t *iterations,
                         bool *converged);

/**
 * Creates a trainer; on success `*out` receives a handle to release with
 * [`narr_trainer_free`].
 *
 * # Safety
 * `channel` and `config` must point to valid structs and `out` to a
 * writable pointer.
 */
enum NarrStatus narr_trainer_new(const struct NarrChannelParams *channel,
                                 const struct NarrTrainConfig *config,
                                 struct NarrTrainer **out);

/**
 * # Safety
 * `trainer` must be NULL or a live handle from [`narr_trainer_new`].
 */
void narr_trainer_free(struct NarrTrainer *trainer);

/**
 * Runs `steps` alternating iterations (critics, then inputs).
 *
 * # Safety
 * `trainer` must be a live handle not used concurrently.
 */
enum NarrStatus narr_trainer_step(struct NarrTrainer *trainer, size_t steps);

/**
 * Iterations completed so far (0 for a NULL handle).
 *
 * # Safety
 * `trainer` must be NULL or a live handle.
 */
size_t narr_trainer_iteration(const struct NarrTrainer *trainer);

/**
 * Evaluates the current critics on `samples` fresh draws seeded by `seed`.
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum NarrStatus narr_trainer_evaluate(const struct NarrTrainer *trainer,
                                      size_t samples,
                                      uint64_t seed,
                                      struct NarrRates *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NARR_H */
