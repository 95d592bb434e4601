#ifndef SYNCPKL_H
#define SYNCPKL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Fact serialization configurations.
 */
typedef enum {
  SYNCPKL_FEATURE_CONFIG_HEAD_ONLY = 0,
  SYNCPKL_FEATURE_CONFIG_TAIL_ONLY = 1,
  SYNCPKL_FEATURE_CONFIG_HEAD_TAIL = 2,
  SYNCPKL_FEATURE_CONFIG_RELATION_HEAD_TAIL = 3,
} SyncpklFeatureConfig;

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  SYNCPKL_STATUS_OK = 0,
  SYNCPKL_STATUS_NULL_POINTER = 1,
  SYNCPKL_STATUS_INVALID_UTF8 = 2,
  SYNCPKL_STATUS_INVALID_ARGUMENT = 3,
  SYNCPKL_STATUS_PARSE_ERROR = 4,
  SYNCPKL_STATUS_IO_ERROR = 5,
} SyncpklStatus;

/**
 * Verdict values produced by `syncpkl_parse_verdict`.
 */
typedef enum {
  SYNCPKL_VERDICT_YES = 0,
  SYNCPKL_VERDICT_NO = 1,
  SYNCPKL_VERDICT_UNPARSEABLE = 2,
} SyncpklVerdict;

/**
 * Opaque handle to a trained model (a persisted train run).
 */
typedef struct SyncpklModel SyncpklModel;

/**
 * Binary classification metrics over a prediction/gold pair of arrays.
 */
typedef struct {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  double precision;
  double recall;
  double f1;
  double accuracy;
  /**
   * Nonzero when a degenerate ratio was defined 0.
   */
  uint8_t degenerate;
} SyncpklMetrics;

/**
 * Threshold calibration result.
 */
typedef struct {
  double threshold;
  double achieved_positive_rate;
  double target_positive_rate;
  uint64_t sample_size;
} SyncpklCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *syncpkl_version(void);

/**
 * Frees a string returned by this library.
 */
void syncpkl_string_free(char *s);

/**
 * Parses an annotator completion: the verdict is the last
 * "Answer: Yes|No" line, everything before it the rationale.
 * `out_rationale` may be NULL if the caller only wants the verdict.
 */
SyncpklStatus syncpkl_parse_verdict(const char *completion_text,
                                    SyncpklVerdict *out_verdict,
                                    char **out_rationale);

/**
 * Serializes a (head, relation, tail) fact under a feature configuration.
 * The relation accepts the five canonical names with case/separator
 * variants.
 */
SyncpklStatus syncpkl_serialize_fact(const char *head,
                                     const char *relation,
                                     const char *tail,
                                     SyncpklFeatureConfig config,
                                     char **out_text);

/**
 * Confusion-matrix metrics over parallel arrays of 0/1 labels.
 */
SyncpklStatus syncpkl_compute_metrics(const uint8_t *predictions,
                                      const uint8_t *gold,
                                      uintptr_t len,
                                      SyncpklMetrics *out_metrics);

/**
 * Metrics straight from confusion counts.
 */
SyncpklStatus syncpkl_metrics_from_confusion(uint64_t tp,
                                             uint64_t fp,
                                             uint64_t fn_,
                                             uint64_t tn,
                                             SyncpklMetrics *out_metrics);

/**
 * Quantile threshold calibration over a score array.
 */
SyncpklStatus syncpkl_calibrate_threshold(const double *scores,
                                          uintptr_t len,
                                          double target_positive_rate,
                                          SyncpklCalibration *out_calibration);

/**
 * Loads a persisted train run (trainrun.json) into an opaque model handle.
 */
SyncpklStatus syncpkl_model_load(const char *trainrun_path, SyncpklModel **out_model);

/**
 * Probability that the fact is relevant to the context, using the model's
 * feature configuration. Only the bundled reference backend is loadable
 * over this ABI.
 */
SyncpklStatus syncpkl_model_predict(const SyncpklModel *model,
                                    const char *context,
                                    const char *head,
                                    const char *relation,
                                    const char *tail,
                                    double *out_probability);

/**
 * Frees a model handle.
 */
void syncpkl_model_free(SyncpklModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SYNCPKL_H */
