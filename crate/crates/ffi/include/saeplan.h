#ifndef SAEPLAN_H
#define SAEPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes.
 */
typedef enum SaeStatus {
  SAE_STATUS_OK = 0,
  SAE_STATUS_DATA_ERROR = 1,
  SAE_STATUS_USAGE_ERROR = 2,
  SAE_STATUS_NUMERIC_ERROR = 3,
} SaeStatus;

/**
 * Loaded inputs: population plus optional covariates and contiguity graph.
 */
typedef struct SaeDataset SaeDataset;

/**
 * A fitted posterior over the dataset's cells.
 */
typedef struct SaeFit SaeFit;

/**
 * Outcome of the sample-size search.
 */
typedef struct SaeSsdResult SaeSsdResult;

/**
 * Search settings for `saeplan_ssd_run`; obtain defaults from
 * `saeplan_ssd_options_default` and override what you need.
 */
typedef struct SaeSsdOptions {
  double f_a;
  double f_b;
  /**
   * Interval-width tolerance.
   */
  double h;
  /**
   * Replications per candidate fraction.
   */
  uint32_t replications;
  /**
   * Tolerated loss.
   */
  double kappa;
  /**
   * Acceptable risk that the loss exceeds kappa.
   */
  double gamma;
  /**
   * Nonzero: population-weighted loss; zero: suppressed-cell count.
   */
  uint8_t weighted_loss;
  /**
   * Nonzero: the estimated-eligibility loss drives the search.
   */
  uint8_t use_estimated_eligibility;
  /**
   * Sampling fraction of the simulated pilot survey.
   */
  double pilot_fraction;
  uint64_t master_seed;
} SaeSsdOptions;

/**
 * One row of the search trace.
 */
typedef struct SaeSsdStepInfo {
  /**
   * 0 for the endpoint evaluations, then 1, 2, ... for midpoints.
   */
  uint32_t step;
  double f_k;
  double mean_loss_true;
  double mean_loss_est;
  double risk_true;
  double risk_est;
  double interval_lo;
  double interval_hi;
} SaeSsdStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *saeplan_version(void);

/**
 * Copy the last error message for this thread into `buf` (truncated to
 * `len - 1` bytes, always NUL-terminated when `len > 0`). Returns the full
 * message length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t saeplan_last_error_message(char *buf, uintptr_t len);

/**
 * Load a dataset from CSV files. `covariates_path` and `adjacency_path`
 * may be null when the models to be fitted do not need them.
 *
 * # Safety
 * Paths must be NUL-terminated strings or null; `out` must be a valid
 * pointer to receive the handle.
 */
enum SaeStatus saeplan_dataset_load(const char *population_path,
                                    const char *covariates_path,
                                    const char *adjacency_path,
                                    struct SaeDataset **out);

/**
 * Generate a reproducible synthetic dataset (lattice contiguity, two
 * standardized covariates). `rates` holds one base prevalence per group.
 *
 * # Safety
 * `rates` must point to `rates_len` doubles or be null; `out` must be valid.
 */
enum SaeStatus saeplan_dataset_synth(uint32_t areas,
                                     uint32_t groups,
                                     const double *rates,
                                     uintptr_t rates_len,
                                     uint64_t headcount_min,
                                     uint64_t headcount_max,
                                     uint64_t seed,
                                     struct SaeDataset **out);

/**
 * Number of areas (0 for a null handle).
 */
uint32_t saeplan_dataset_areas(const struct SaeDataset *dataset);

/**
 * Number of groups (0 for a null handle).
 */
uint32_t saeplan_dataset_groups(const struct SaeDataset *dataset);

/**
 * Grand population total (0 for a null handle).
 */
uint64_t saeplan_dataset_population_total(const struct SaeDataset *dataset);

/**
 * Release a dataset handle (null is a no-op).
 *
 * # Safety
 * `dataset` must be a handle from this library, not yet freed.
 */
void saeplan_dataset_free(struct SaeDataset *dataset);

/**
 * Simulate one survey of the dataset at `fraction` and fit the scenario's
 * model (2 = exchangeable, 3 = +covariates, 4 = +spatial).
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be valid.
 */
enum SaeStatus saeplan_fit_survey(const struct SaeDataset *dataset,
                                  uint32_t scenario,
                                  double fraction,
                                  uint64_t seed,
                                  struct SaeFit **out);

/**
 * Posterior mean and SD of the prevalence in one cell.
 *
 * # Safety
 * `fit` must be a live handle; non-null outputs must be writable.
 */
enum SaeStatus saeplan_fit_cell(const struct SaeFit *fit,
                                uint32_t group,
                                uint32_t area,
                                double *mean_out,
                                double *sd_out);

/**
 * Release a fit handle (null is a no-op).
 *
 * # Safety
 * `fit` must be a handle from this library, not yet freed.
 */
void saeplan_fit_free(struct SaeFit *fit);

/**
 * Fill `out` with the default search settings.
 *
 * # Safety
 * `out` must point to writable `SaeSsdOptions` storage.
 */
void saeplan_ssd_options_default(struct SaeSsdOptions *out);

/**
 * Run the full pipeline: pilot survey, design-prior fit, binary search.
 *
 * # Safety
 * `dataset` must be a live handle; `options` must be valid or null
 * (defaults); `out` must be valid.
 */
enum SaeStatus saeplan_ssd_run(const struct SaeDataset *dataset,
                               uint32_t scenario,
                               const struct SaeSsdOptions *options,
                               struct SaeSsdResult **out);

/**
 * The upper bound of the final interval (NaN for a null handle).
 */
double saeplan_ssd_recommended_fraction(const struct SaeSsdResult *result);

/**
 * Effective sample size implied by the recommended fraction.
 */
uint64_t saeplan_ssd_recommended_ess(const struct SaeSsdResult *result);

/**
 * Number of evaluated candidate fractions in the trace.
 */
uint32_t saeplan_ssd_step_count(const struct SaeSsdResult *result);

/**
 * Copy one trace row into `info`.
 *
 * # Safety
 * `result` must be a live handle; `info` must be writable.
 */
enum SaeStatus saeplan_ssd_step(const struct SaeSsdResult *result,
                                uint32_t index,
                                struct SaeSsdStepInfo *info);

/**
 * Release a search-result handle (null is a no-op).
 *
 * # Safety
 * `result` must be a handle from this library, not yet freed.
 */
void saeplan_ssd_free(struct SaeSsdResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAEPLAN_H */
