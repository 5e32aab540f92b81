#ifndef CBCF_H
#define CBCF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stdint.h>

typedef enum CbcfOutcome {
  CBCF_OUTCOME_TRUE_POSITIVE = 0,
  CBCF_OUTCOME_FALSE_POSITIVE = 1,
  CBCF_OUTCOME_FALSE_NEGATIVE = 2,
  CBCF_OUTCOME_TRUE_NEGATIVE = 3,
} CbcfOutcome;

/**
 * Which rule a result refers to.
 */
typedef enum CbcfRule {
  CBCF_RULE_BASELINE = 0,
  CBCF_RULE_PROPOSED = 1,
} CbcfRule;

/**
 * Result of every fallible call. Values 1-3 match the CLI exit codes.
 */
typedef enum CbcfStatus {
  CBCF_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or an invalid configuration.
   */
  CBCF_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or malformed data, unknown ids.
   */
  CBCF_STATUS_DATA = 2,
  CBCF_STATUS_NUMERICAL = 3,
  /**
   * The requested result has not been computed.
   */
  CBCF_STATUS_NOT_AVAILABLE = 4,
  CBCF_STATUS_PANIC = 5,
} CbcfStatus;

typedef enum CbcfTarget {
  CBCF_TARGET_INGEST = 0,
  CBCF_TARGET_SPLIT = 1,
  CBCF_TARGET_SIMILARITY = 2,
  CBCF_TARGET_PREDICT = 3,
  CBCF_TARGET_CLUSTER = 4,
  CBCF_TARGET_EVALUATE = 5,
  CBCF_TARGET_SWEEP = 6,
} CbcfTarget;

/**
 * Opaque ratings dataset.
 */
typedef struct CbcfDataset CbcfDataset;

/**
 * Opaque experiment: a configuration plus the results of its last run.
 */
typedef struct CbcfExperiment CbcfExperiment;

typedef struct CbcfThresholds {
  double alpha;
  double beta;
  double gamma;
  double delta_pref;
} CbcfThresholds;

typedef struct CbcfMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  double precision;
  double recall;
  double f1;
} CbcfMetrics;

typedef struct CbcfGridPoint {
  double alpha;
  double beta;
  double gamma;
  struct CbcfMetrics metrics;
} CbcfGridPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cbcf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cbcf_version(void);

/**
 * Loads a tab- or pipe-separated `user item rating [timestamp]` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for a handle.
 */
enum CbcfStatus cbcf_dataset_load(const char *path, struct CbcfDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void cbcf_dataset_free(struct CbcfDataset *ds);

/**
 * Number of ratings, and of users and items with at least one rating.
 *
 * # Safety
 * Output pointers must be writable; `ds` must be a live handle.
 */
enum CbcfStatus cbcf_dataset_counts(const struct CbcfDataset *ds,
                                    uint64_t *ratings,
                                    uint64_t *users,
                                    uint64_t *items);

/**
 * # Safety
 * `out` must be writable; `ds` must be a live handle.
 */
enum CbcfStatus cbcf_dataset_sparsity(const struct CbcfDataset *ds, double *out);

/**
 * Per-user random holdout. Both outputs are new handles.
 *
 * # Safety
 * `ds` must be a live handle; `train` and `test` must be writable.
 */
enum CbcfStatus cbcf_dataset_split_random(const struct CbcfDataset *ds,
                                          double test_fraction,
                                          uint64_t seed,
                                          struct CbcfDataset **train,
                                          struct CbcfDataset **test);

/**
 * Pearson correlation between two users given by raw id. `defined` is set
 * to 0 when fewer than two co-ratings exist or a variance vanishes.
 *
 * # Safety
 * `ds` must be a live handle; output pointers must be writable.
 */
enum CbcfStatus cbcf_dataset_pcc(const struct CbcfDataset *ds,
                                 uint64_t user_a,
                                 uint64_t user_b,
                                 bool *defined,
                                 double *out);

/**
 * Maps a correlation in [-1, 1] to a distance in [0, 2].
 *
 * # Safety
 * `out` must be writable.
 */
enum CbcfStatus cbcf_shift_pcc(double s, double *out);

/**
 * Gate decision for one prediction. Pass `has_cbar = false` when the
 * item has no rating within the user's cluster.
 *
 * # Safety
 * `t` must point to valid thresholds; `recommend` must be writable.
 */
enum CbcfStatus cbcf_decide(double predicted,
                            bool has_cbar,
                            double cbar,
                            const struct CbcfThresholds *t,
                            bool *recommend);

/**
 * Confusion-matrix cell of one pair.
 *
 * # Safety
 * `t` must point to valid thresholds; `out` must be writable.
 */
enum CbcfStatus cbcf_classify(double predicted,
                              double actual,
                              bool has_cbar,
                              double cbar,
                              const struct CbcfThresholds *t,
                              enum CbcfOutcome *out);

/**
 * Reads a TOML experiment file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CbcfStatus cbcf_experiment_load(const char *path, struct CbcfExperiment **out);

/**
 * Starts an experiment with default settings on `dataset`.
 *
 * # Safety
 * `dataset` must be a NUL-terminated string; `out` must be writable.
 */
enum CbcfStatus cbcf_experiment_new(const char *dataset, struct CbcfExperiment **out);

/**
 * # Safety
 * `exp` must be null or a handle not yet freed.
 */
void cbcf_experiment_free(struct CbcfExperiment *exp);

/**
 * Overrides one config field (dotted path or leaf name, value as a TOML
 * literal or bare string). Invalidates earlier results.
 *
 * # Safety
 * `exp` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum CbcfStatus cbcf_experiment_set(struct CbcfExperiment *exp, const char *key, const char *value);

/**
 * Runs the pipeline up to `target`, writing artifacts to the configured
 * output directory.
 *
 * # Safety
 * `exp` must be a live handle.
 */
enum CbcfStatus cbcf_experiment_run(struct CbcfExperiment *exp, enum CbcfTarget target);

/**
 * Metrics of a fixed-threshold rule from the last `Evaluate` run.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum CbcfStatus cbcf_experiment_report(const struct CbcfExperiment *exp,
                                       enum CbcfRule rule,
                                       struct CbcfMetrics *out);

/**
 * Best grid point of a rule from the last `Sweep` run.
 * `NotAvailable` when no point satisfies the constraint.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum CbcfStatus cbcf_experiment_best(const struct CbcfExperiment *exp,
                                     enum CbcfRule rule,
                                     struct CbcfGridPoint *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBCF_H */
