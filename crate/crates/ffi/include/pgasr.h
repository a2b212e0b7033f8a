#ifndef PGASR_H
#define PGASR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PgasrStatus {
  PGASR_STATUS_OK = 0,
  PGASR_STATUS_NULL_POINTER = 1,
  PGASR_STATUS_INVALID_ARGUMENT = 2,
  PGASR_STATUS_IO = 3,
  PGASR_STATUS_CHECKPOINT = 4,
  PGASR_STATUS_NON_FINITE = 5,
  PGASR_STATUS_INTERNAL = 6,
} PgasrStatus;

/**
 * Opaque urban flow graph.
 */
typedef struct PgasrGraph PgasrGraph;

/**
 * Opaque trained model with its standardization constants.
 */
typedef struct PgasrModel PgasrModel;

/**
 * Error metrics in flow units; MAPE in percent, NaN when no target passed the mask.
 */
typedef struct PgasrMetrics {
  double mae_in;
  double mae_out;
  double mape_in;
  double mape_out;
  size_t n_eval_points;
} PgasrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 *
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *pgasr_last_error_message(void);

/**
 * Creates an `height × width` grid graph with 4- or 8-connectivity.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum PgasrStatus pgasr_graph_new_grid(size_t height,
                                      size_t width,
                                      uint32_t neighbors,
                                      struct PgasrGraph **out);

/**
 * Releases a graph; null is ignored.
 *
 * # Safety
 * `graph` must come from [`pgasr_graph_new_grid`] and not be used afterwards.
 */
void pgasr_graph_free(struct PgasrGraph *graph);

/**
 * Number of regions `M`, or 0 for a null handle.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
size_t pgasr_graph_num_nodes(const struct PgasrGraph *graph);

/**
 * Softmax over `n` scores plus `1/n`, written to `out`.
 *
 * # Safety
 * `eps` and `out` must each hold `n` doubles.
 */
enum PgasrStatus pgasr_normalize_weights(const double *eps, size_t n, double *out);

/**
 * `alpha·u + beta·c` elementwise over `n` scores.
 *
 * # Safety
 * `u_norm`, `c_norm` and `out` must each hold `n` doubles.
 */
enum PgasrStatus pgasr_combine_scores(const double *u_norm,
                                      const double *c_norm,
                                      size_t n,
                                      double alpha,
                                      double beta,
                                      double *out);

/**
 * Consistency score per sample from `[batch, M, 2]` predictions and last steps.
 *
 * `aggregation` is 0 for the row-normalized adjacency and 1 for the binary one.
 *
 * # Safety
 * `y_pred` and `x_last` must hold `batch·M·2` doubles and `out` `batch` doubles.
 */
enum PgasrStatus pgasr_physical_consistency(const struct PgasrGraph *graph,
                                            const double *y_pred,
                                            const double *x_last,
                                            size_t batch,
                                            uint32_t aggregation,
                                            double *out);

/**
 * MC-dropout variance per sample from `k` stacked passes of `batch × per_sample` values.
 *
 * # Safety
 * `stack` must hold `k·batch·per_sample` doubles and `out` `batch` doubles.
 */
enum PgasrStatus pgasr_model_uncertainty(const double *stack,
                                         size_t k,
                                         size_t batch,
                                         size_t per_sample,
                                         double *out);

/**
 * MAE and masked MAPE over `n_points` `[inflow, outflow]` pairs.
 *
 * # Safety
 * `y_true` and `y_pred` must hold `2·n_points` doubles; `out` must be writable.
 */
enum PgasrStatus pgasr_compute_metrics(const double *y_true,
                                       const double *y_pred,
                                       size_t n_points,
                                       double mask_threshold,
                                       struct PgasrMetrics *out);

/**
 * Loads a checkpoint written by the training pipeline.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum PgasrStatus pgasr_model_load(const char *path, struct PgasrModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`pgasr_model_load`] and not be used afterwards.
 */
void pgasr_model_free(struct PgasrModel *model);

/**
 * Input window length `T_in` the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pgasr_model_input_len(const struct PgasrModel *model);

/**
 * Next-step flows `[batch, M, 2]` from flow windows `[batch, T_in, M, 2]`, both in flow units.
 *
 * # Safety
 * `x` must hold `batch·T_in·M·2` floats and `out` `batch·M·2` floats.
 */
enum PgasrStatus pgasr_model_predict(const struct PgasrModel *model,
                                     const struct PgasrGraph *graph,
                                     const float *x,
                                     size_t batch,
                                     float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGASR_H */
