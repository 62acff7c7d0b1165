#ifndef FSA_H
#define FSA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsaStatus {
  FSA_STATUS_OK = 0,
  FSA_STATUS_NULL_POINTER = 1,
  FSA_STATUS_INVALID_UTF8 = 2,
  FSA_STATUS_PARSE = 3,
  FSA_STATUS_VALIDATION = 4,
  FSA_STATUS_NUMERICAL = 5,
  FSA_STATUS_OUT_OF_RANGE = 6,
  FSA_STATUS_PANIC = 7,
} FsaStatus;

/**
 * Security class codes; `Unassessed` marks rows whose fault could not be
 * applied.
 */
typedef enum FsaClass {
  FSA_CLASS_SECURE = 0,
  FSA_CLASS_WARNING = 1,
  FSA_CLASS_INSECURE = 2,
  FSA_CLASS_UNASSESSED = -1,
} FsaClass;

/**
 * A validated grid.
 */
typedef struct FsaGrid FsaGrid;

/**
 * A trained predictor.
 */
typedef struct FsaPredictor FsaPredictor;

/**
 * Result of screening one operating condition.
 */
typedef struct FsaTable FsaTable;

/**
 * Aggregated system parameters for the closed-form response.
 */
typedef struct FsaAggregate {
  double h_syn;
  double h_vir;
  double d;
  double r_inv;
  double t_r;
  double f_h;
} FsaAggregate;

/**
 * Six indicators in the order rocof_max, f_nadir, t_nadir, f_ss,
 * dp0_syn, dpinf_syn.
 */
typedef struct FsaMetrics {
  double values[6];
} FsaMetrics;

typedef struct FsaRow {
  uint64_t fault_id;
  uint64_t location;
  double delta_p;
  struct FsaMetrics metrics;
  double residuals[3];
  enum FsaClass security_class;
  /**
   * 1 when the corrector replaced the preliminary output.
   */
  int32_t corrected;
  /**
   * 0 when the fault could not be assessed; metrics are NaN then.
   */
  int32_t ok;
} FsaRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *fsa_version(void);

/**
 * Message for the last failed call on this thread. Valid until the next
 * call that fails.
 */
const char *fsa_last_error(void);

/**
 * Frees a string returned by the library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void fsa_string_free(char *s);

/**
 * Closed-form aggregated response for an imbalance `delta_p` (pu).
 *
 * # Safety
 * `agg` and `out` must be valid pointers.
 */
enum FsaStatus fsa_asfr_predict(const struct FsaAggregate *agg,
                                double delta_p,
                                double f_n,
                                struct FsaMetrics *out);

/**
 * Security class of a set of indicators under the default thresholds.
 *
 * # Safety
 * `m` and `out` must be valid pointers.
 */
enum FsaStatus fsa_classify(const struct FsaMetrics *m, double f_n, enum FsaClass *out);

/**
 * Loads a predictor from JSON: either a serialized predictor or a bare
 * model checkpoint (gated when its corrector is trained).
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FsaStatus fsa_predictor_from_json(const char *json, struct FsaPredictor **out);

/**
 * The closed-form predictor, which needs no training.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FsaStatus fsa_predictor_knowledge(struct FsaPredictor **out);

/**
 * # Safety
 * `p` must come from this library and not be freed twice.
 */
void fsa_predictor_free(struct FsaPredictor *p);

/**
 * Parses and validates a grid description.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FsaStatus fsa_grid_from_json(const char *json, struct FsaGrid **out);

/**
 * # Safety
 * `g` must come from this library and not be freed twice.
 */
void fsa_grid_free(struct FsaGrid *g);

/**
 * Screens one operating condition (JSON object) against a fault list
 * (JSON array) with the default thresholds. Faults that cannot be applied
 * produce rows with `ok == 0` rather than an error.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum FsaStatus fsa_assess(const struct FsaPredictor *predictor,
                          const struct FsaGrid *grid,
                          const char *condition_json,
                          const char *faults_json,
                          struct FsaTable **out);

/**
 * Number of rows, or 0 for a null table.
 *
 * # Safety
 * `t` must be null or a valid table.
 */
uintptr_t fsa_table_len(const struct FsaTable *t);

/**
 * Wall-clock seconds the assessment took.
 *
 * # Safety
 * `t` must be null or a valid table.
 */
double fsa_table_elapsed(const struct FsaTable *t);

/**
 * Copies row `i` into `out`.
 *
 * # Safety
 * `t` and `out` must be valid pointers.
 */
enum FsaStatus fsa_table_row(const struct FsaTable *t, uintptr_t i, struct FsaRow *out);

/**
 * The table as CSV; free the result with [`fsa_string_free`].
 *
 * # Safety
 * `t` must be a valid table.
 */
char *fsa_table_csv(const struct FsaTable *t);

/**
 * # Safety
 * `t` must come from this library and not be freed twice.
 */
void fsa_table_free(struct FsaTable *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSA_H */
