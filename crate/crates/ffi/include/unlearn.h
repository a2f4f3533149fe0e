#ifndef UNLEARN_H
#define UNLEARN_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum UnlStatus {
  UNL_STATUS_OK = 0,
  UNL_STATUS_NULL_POINTER = 1,
  UNL_STATUS_INVALID_ARGUMENT = 2,
  UNL_STATUS_SHAPE = 3,
  UNL_STATUS_UNDEFINED = 4,
  UNL_STATUS_CONFIG = 5,
  UNL_STATUS_IO = 6,
  UNL_STATUS_NON_FINITE = 7,
  UNL_STATUS_RANK = 8,
  UNL_STATUS_PANIC = 9,
} UnlStatus;

typedef enum UnlNorm {
  UNL_NORM_L2 = 0,
  UNL_NORM_LINF = 1,
} UnlNorm;

/**
 * Opaque trained model.
 */
typedef struct UnlModel UnlModel;

/**
 * Opaque epochs x layers SAL matrix.
 */
typedef struct UnlSalMatrix UnlSalMatrix;

typedef struct UnlUdReport {
  double beta;
  double lp_clean;
  double lp_poisoned;
  double ud;
} UnlUdReport;

typedef struct UnlTwoMeans {
  double c1;
  double c2;
  double sse;
  /**
   * Number of sorted values in the lower cluster.
   */
  size_t split;
  bool degenerate;
} UnlTwoMeans;

typedef struct UnlProbe {
  double epsilon;
  enum UnlNorm norm;
  size_t ascent_iters;
  uint64_t seed;
} UnlProbe;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *unl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *unl_version(void);

/**
 * Builds a SAL matrix from `n_epochs * n_layers` row-major values. NaN marks
 * a missing cell.
 *
 * # Safety
 * `values` must point to `n_epochs * n_layers` readable doubles and `out`
 * must be writable.
 */
enum UnlStatus unl_sal_matrix_new(const double *values,
                                  size_t n_epochs,
                                  size_t n_layers,
                                  struct UnlSalMatrix **out);

/**
 * Loads `sal.csv` and `sal.json` from a run directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum UnlStatus unl_sal_matrix_load(const char *dir, struct UnlSalMatrix **out);

/**
 * # Safety
 * `m` must be null or a handle from this library that was not yet freed.
 */
void unl_sal_matrix_free(struct UnlSalMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `n_epochs` and `n_layers` writable.
 */
enum UnlStatus unl_sal_matrix_shape(const struct UnlSalMatrix *m,
                                    size_t *n_epochs,
                                    size_t *n_layers);

/**
 * Unlearnable distance of a poisoned run against its clean reference.
 *
 * # Safety
 * Both matrices must be live handles and `out` writable.
 */
enum UnlStatus unl_unlearnable_distance(const struct UnlSalMatrix *poisoned,
                                        const struct UnlSalMatrix *clean,
                                        struct UnlUdReport *out);

/**
 * Optimal two-cluster split of `n` finite values.
 *
 * # Safety
 * `values` must point to `n` readable doubles and `out` must be writable.
 */
enum UnlStatus unl_kmeans2(const double *values, size_t n, struct UnlTwoMeans *out);

/**
 * Checks a `method,lp,ud,bold` table. `passed` receives the verdict; the
 * return value only reports whether the check could run.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `passed` writable.
 */
enum UnlStatus unl_table_check(const char *path, bool *passed);

/**
 * Runs the full benchmark. A null `config_json` selects the built-in toy
 * config. `failures` receives the number of methods that did not finish.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `failures` writable.
 */
enum UnlStatus unl_run_experiment(const char *config_json, const char *out_dir, size_t *failures);

/**
 * Loads a checkpoint JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum UnlStatus unl_model_load(const char *path, struct UnlModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library that was not yet freed.
 */
void unl_model_free(struct UnlModel *m);

/**
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum UnlStatus unl_model_param_count(const struct UnlModel *m, size_t *out);

/**
 * SAL of layer `layer` on `n` labelled rows of width `dim`.
 *
 * # Safety
 * `features` must hold `n * dim` doubles, `labels` `n` entries, and `out`
 * must be writable.
 */
enum UnlStatus unl_sal_layer(const struct UnlModel *m,
                             size_t layer,
                             const double *features,
                             const size_t *labels,
                             size_t n,
                             size_t dim,
                             struct UnlProbe probe,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNLEARN_H */
