/* C interface to the lml online contact-force model learner. */

#ifndef LML_H
#define LML_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LmlStatus {
  LML_STATUS_LML_OK = 0,
  // A required pointer was null.
  LML_STATUS_LML_NULL_POINTER = 1,
  // An argument failed validation (non-finite values, bad dimensions).
  LML_STATUS_LML_INVALID_ARGUMENT = 2,
  // The configuration is unusable (e.g. covariance not positive definite).
  LML_STATUS_LML_INVALID_CONFIG = 3,
  // A numerical invariant failed inside the estimator.
  LML_STATUS_LML_NUMERICAL_FAILURE = 4,
} LmlStatus;

// Opaque online estimator: shared covariance, model belief, and the sensor
// noise description it was created with.
typedef struct LmlFilter LmlFilter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length of the engineered feature vector built by `lml_feature_map`.
size_t lml_feature_dim(void);

// Number of wrench components in a measurement.
size_t lml_wrench_dim(void);

// Static description of a status code.
const char *lml_status_message(enum LmlStatus status);

// Creates a filter for `feature_dim` features.
//
// `sensor_cov` is the 6x6 sensor covariance in row-major order;
// `reg_weights` has one entry per feature; `process_noise` scales the
// identity process covariance (0 disables forgetting). On success the
// handle is written to `out` and must be released with `lml_filter_free`.
enum LmlStatus lml_filter_new(size_t feature_dim,
                              const double *sensor_cov,
                              const double *reg_weights,
                              double process_noise,
                              struct LmlFilter **out);

// Releases a filter handle. Null is allowed.
void lml_filter_free(struct LmlFilter *filter);

// Feature dimension of a filter.
size_t lml_filter_feature_dim(const struct LmlFilter *filter);

// Measurement updates absorbed so far.
uint64_t lml_filter_step_count(const struct LmlFilter *filter);

// Absorbs one (features, raw measurement) pair. `measurement` is the raw
// 6-vector `[force, torque]`. When `innovation_variance` is non-null the
// scalar `w' Sigma w + 1` of this update is written there.
enum LmlStatus lml_filter_step(struct LmlFilter *filter,
                               const double *features,
                               const double *measurement,
                               double *innovation_variance);

// Applies one adaptive-regularization pass with per-coordinate weights
// (zero entries skip their coordinate).
enum LmlStatus lml_filter_regularize(struct LmlFilter *filter, const double *weights);

// Predicted raw wrench for a feature vector, written to `wrench_out[6]`.
enum LmlStatus lml_filter_predict(const struct LmlFilter *filter,
                                  const double *features,
                                  double *wrench_out);

// Copies the raw-coordinate model estimate into `model_out` as a
// row-major `6 x feature_dim` buffer.
enum LmlStatus lml_filter_model(const struct LmlFilter *filter, double *model_out);

// Builds the engineered 19-entry feature vector from a pose and command.
//
// `rotation` is the 3x3 attitude matrix in column-major order; the output
// layout is `[position, vec(rotation), desired_position,
// rotation_correction, 1]`.
enum LmlStatus lml_feature_map(const double *position,
                               const double *rotation,
                               const double *desired_position,
                               const double *rotation_correction,
                               double *features_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LML_H */
