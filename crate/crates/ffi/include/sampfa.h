#ifndef SAMPFA_H
#define SAMPFA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a library call.
 */
typedef enum SampfaStatus {
  SAMPFA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SAMPFA_STATUS_NULL_POINTER = 1,
  /**
   * Malformed input: bad JSON, invalid network, wrong buffer length.
   */
  SAMPFA_STATUS_INVALID_INPUT = 2,
  /**
   * File could not be read.
   */
  SAMPFA_STATUS_IO = 3,
  /**
   * Newton iteration stopped without meeting the tolerance.
   */
  SAMPFA_STATUS_NOT_CONVERGED = 4,
  /**
   * Singular Jacobian, non-finite values or incomplete angle recovery.
   */
  SAMPFA_STATUS_NUMERICAL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  SAMPFA_STATUS_INTERNAL = 6,
} SampfaStatus;

/**
 * Trained surrogate model.
 */
typedef struct SampfaModel SampfaModel;

/**
 * Parsed power network.
 */
typedef struct SampfaNetwork SampfaNetwork;

/**
 * Converged or last-iterate power flow state.
 */
typedef struct SampfaSolution SampfaSolution;

typedef struct SampfaGraphStats {
  size_t n_buses;
  size_t n_branches;
  double avg_degree;
  double algebraic_connectivity;
  bool connected;
} SampfaGraphStats;

typedef struct SampfaSolveReport {
  bool converged;
  size_t iterations;
  double max_mismatch;
  size_t pv_to_pq_switches;
  double wall_time;
} SampfaSolveReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next library call on the same thread.
 */
const char *sampfa_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *sampfa_version(void);

/**
 * Parses a network from nul-terminated JSON.
 *
 * # Safety
 * `json` must be null or a valid C string; `out` must be null or writable.
 */
enum SampfaStatus sampfa_network_from_json(const char *json, struct SampfaNetwork **out);

/**
 * Loads a network from a JSON case file.
 *
 * # Safety
 * `path` must be null or a valid C string; `out` must be null or writable.
 */
enum SampfaStatus sampfa_network_load(const char *path, struct SampfaNetwork **out);

/**
 * The built-in IEEE 39-bus case.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum SampfaStatus sampfa_network_ieee39(struct SampfaNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from this library not yet freed.
 */
void sampfa_network_free(struct SampfaNetwork *net);

/**
 * Number of buses; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t sampfa_network_bus_count(const struct SampfaNetwork *net);

/**
 * Number of branches, in and out of service; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t sampfa_network_branch_count(const struct SampfaNetwork *net);

/**
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
enum SampfaStatus sampfa_graph_stats(const struct SampfaNetwork *net, struct SampfaGraphStats *out);

/**
 * Flat-start Newton-Raphson power flow. Non-positive `tol` or zero
 * `max_iter` select the defaults (1e-8 p.u., 200). On
 * `SAMPFA_STATUS_NOT_CONVERGED` the last iterate is still returned in
 * `out`. `report` may be null.
 *
 * # Safety
 * `net` must be a live handle; `out` writable; `report` null or writable.
 */
enum SampfaStatus sampfa_solve(const struct SampfaNetwork *net,
                               double tol,
                               size_t max_iter,
                               struct SampfaSolution **out,
                               struct SampfaSolveReport *report);

/**
 * # Safety
 * `sol` must be null or a handle from this library not yet freed.
 */
void sampfa_solution_free(struct SampfaSolution *sol);

/**
 * Copies bus states. Every array holds one entry per bus; any may be null
 * to skip it. Angles are in radians, powers in p.u.
 *
 * # Safety
 * Non-null arrays must hold `n` writable doubles.
 */
enum SampfaStatus sampfa_solution_buses(const struct SampfaSolution *sol,
                                        double *v,
                                        double *theta,
                                        double *p,
                                        double *q,
                                        size_t n);

/**
 * Copies series branch flows, two per branch: entry `2k` is measured at
 * the from bus of branch `k`, entry `2k + 1` at its to bus.
 *
 * # Safety
 * `p` and `q` must each hold `len` writable doubles.
 */
enum SampfaStatus sampfa_solution_branch_flows(const struct SampfaSolution *sol,
                                               double *p,
                                               double *q,
                                               size_t len);

/**
 * Recovers bus angles from voltage magnitudes and series branch flows
 * (layout of [`sampfa_solution_branch_flows`]), starting at the slack bus
 * with the network's reference angle. Fails with
 * `SAMPFA_STATUS_NUMERICAL` when some bus cannot be reached; reached
 * buses are still written and the rest are NaN.
 *
 * # Safety
 * `v` and `theta` must hold `n` doubles; `p` and `q` must hold `len`.
 */
enum SampfaStatus sampfa_recover_angles(const struct SampfaNetwork *net,
                                        const double *v,
                                        size_t n,
                                        const double *p,
                                        const double *q,
                                        size_t len,
                                        double *theta);

/**
 * Loads a checkpoint and its `<path>.json` sidecar.
 *
 * # Safety
 * `path` must be a valid C string; `out` writable.
 */
enum SampfaStatus sampfa_model_load(const char *path, struct SampfaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void sampfa_model_free(struct SampfaModel *model);

/**
 * Runs the model on `net`. `bus_out` receives `[P, Q, V]` per bus
 * (`bus_len = 3 n`); `branch_out` receives `[P, Q]` per directed flow in
 * the layout of [`sampfa_solution_branch_flows`] (`branch_len = 4 E`),
 * with zeros for out-of-service branches.
 *
 * # Safety
 * Handles must be live; arrays must hold the stated number of doubles.
 */
enum SampfaStatus sampfa_model_predict(const struct SampfaModel *model,
                                       const struct SampfaNetwork *net,
                                       double *bus_out,
                                       size_t bus_len,
                                       double *branch_out,
                                       size_t branch_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMPFA_H */
