#ifndef BMDP_H
#define BMDP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BmdpStatus {
  BMDP_STATUS_OK = 0,
  BMDP_STATUS_NULL_POINTER = 1,
  BMDP_STATUS_DOMAIN = 2,
  BMDP_STATUS_INVALID_MODEL = 3,
  BMDP_STATUS_NOT_CONVERGED = 4,
  BMDP_STATUS_FORMAT = 5,
  BMDP_STATUS_IO = 6,
  BMDP_STATUS_OUT_OF_RANGE = 7,
  BMDP_STATUS_PANIC = 8,
  BMDP_STATUS_OTHER = 9,
} BmdpStatus;

/**
 * Finite budgeted MDP.
 */
typedef struct BmdpMdp BmdpMdp;

/**
 * Output of budgeted value iteration: the Q table, its greedy policy and
 * the convergence record.
 */
typedef struct BmdpSolution BmdpSolution;

/**
 * `(1 - weight) δ(first) + weight δ(second)` over augmented actions, with
 * the expected value of the mixture.
 */
typedef struct BmdpMixture {
  size_t first_action;
  double first_budget;
  size_t second_action;
  double second_budget;
  double weight;
  double value_reward;
  double value_cost;
  /**
   * Non-zero when the budget is below every achievable cost.
   */
  uint8_t infeasible;
} BmdpMixture;

typedef struct BmdpWitness {
  double epsilon;
  double gamma;
  double q_gap;
  double backup_gap;
  double ratio;
} BmdpWitness;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t bmdp_last_error_message(char *buf, size_t len);

/**
 * Builds a model from flat row-major tables: `transition[(s * A + a) * S + s']`,
 * `reward[s * A + a]`, `cost[s * A + a]`.
 *
 * # Safety
 * The arrays must hold `S·A·S`, `S·A` and `S·A` values; `out` must be valid.
 */
enum BmdpStatus bmdp_mdp_new(size_t n_states,
                             size_t n_actions,
                             const double *transition,
                             const double *reward,
                             const double *cost,
                             double gamma,
                             double budget_min,
                             double budget_max,
                             struct BmdpMdp **out);

/**
 * Parses a model from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid.
 */
enum BmdpStatus bmdp_mdp_from_json(const char *json, struct BmdpMdp **out);

/**
 * # Safety
 * `mdp` must come from this library and not be used afterwards.
 */
void bmdp_mdp_free(struct BmdpMdp *mdp);

/**
 * # Safety
 * `mdp` must be a valid handle or null.
 */
size_t bmdp_mdp_n_states(const struct BmdpMdp *mdp);

/**
 * # Safety
 * `mdp` must be a valid handle or null.
 */
size_t bmdp_mdp_n_actions(const struct BmdpMdp *mdp);

/**
 * Budgeted value iteration on the budget grid `grid[0..n_grid]`
 * (strictly increasing). `max_iters == 0` selects the default bound.
 * Running out of iterations still yields a solution; check
 * [`bmdp_solution_converged`].
 *
 * # Safety
 * `mdp` must be valid, `grid` must hold `n_grid` values, `out` must be valid.
 */
enum BmdpStatus bmdp_solve_bvi(const struct BmdpMdp *mdp,
                               const double *grid,
                               size_t n_grid,
                               double tol,
                               size_t max_iters,
                               size_t workers,
                               struct BmdpSolution **out);

/**
 * # Safety
 * `sol` must come from this library and not be used afterwards.
 */
void bmdp_solution_free(struct BmdpSolution *sol);

/**
 * # Safety
 * `sol` must be a valid handle or null.
 */
size_t bmdp_solution_iterations(const struct BmdpSolution *sol);

/**
 * # Safety
 * `sol` must be a valid handle or null.
 */
uint8_t bmdp_solution_converged(const struct BmdpSolution *sol);

/**
 * Last sup-norm residual, infinity when no iteration ran.
 *
 * # Safety
 * `sol` must be a valid handle or null.
 */
double bmdp_solution_residual(const struct BmdpSolution *sol);

/**
 * `Q*(s, a, β_k)` for grid index `k`.
 *
 * # Safety
 * `sol` must be valid; the outputs must be valid pointers.
 */
enum BmdpStatus bmdp_solution_q(const struct BmdpSolution *sol,
                                size_t state,
                                size_t action,
                                size_t k,
                                double *out_reward,
                                double *out_cost);

/**
 * Greedy mixture of the solved model at state `s` and budget `β`.
 *
 * # Safety
 * `sol` and `out` must be valid.
 */
enum BmdpStatus bmdp_solution_policy(const struct BmdpSolution *sol,
                                     size_t state,
                                     double beta,
                                     struct BmdpMixture *out);

/**
 * π_hull over `n` candidate points given as parallel arrays.
 *
 * # Safety
 * Each array must hold `n` values; `out` must be valid.
 */
enum BmdpStatus bmdp_pi_hull(size_t n,
                             const double *rewards,
                             const double *costs,
                             const size_t *actions,
                             const double *budgets,
                             double beta,
                             struct BmdpMixture *out);

/**
 * Runs the non-contraction construction on the two-state example.
 *
 * # Safety
 * `out` must be valid.
 */
enum BmdpStatus bmdp_witness_noncontraction(double epsilon, double gamma, struct BmdpWitness *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bmdp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BMDP_H */
