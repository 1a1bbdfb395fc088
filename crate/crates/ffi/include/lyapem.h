#ifndef LYAPEM_H
#define LYAPEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum LyapemStatus {
  LYAPEM_STATUS_OK = 0,
  LYAPEM_STATUS_NULL_POINTER = 1,
  LYAPEM_STATUS_INVALID_ARGUMENT = 2,
  LYAPEM_STATUS_DIMENSION_MISMATCH = 3,
  /**
   * Non-finite state, singular system or another failure of the numerics.
   */
  LYAPEM_STATUS_NUMERICAL = 4,
  LYAPEM_STATUS_IO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  LYAPEM_STATUS_INTERNAL = 6,
} LyapemStatus;

/**
 * Stability verdicts, weakest first.
 */
typedef enum LyapemVerdict {
  LYAPEM_VERDICT_NOT_EQUILIBRIUM = 0,
  LYAPEM_VERDICT_EQUILIBRIUM = 1,
  LYAPEM_VERDICT_STABLE = 2,
  LYAPEM_VERDICT_ASYMPTOTICALLY_STABLE = 3,
  LYAPEM_VERDICT_EXPONENTIALLY_STABLE = 4,
} LyapemVerdict;

/**
 * Opaque MAP-EM system for a Gaussian mixture with known weights and covariances.
 */
typedef struct LyapemSystem LyapemSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Build a system.
 *
 * `weights` has `m` entries, `covariances` `m·dim·dim`, `data` `n·dim`.
 * With `prior_means == NULL` the prior is flat; otherwise `prior_means`
 * (`m·dim`) and `prior_covariances` (`m·dim·dim`) define a Gaussian prior.
 *
 * # Safety
 * All non-null pointers must reference buffers of the stated sizes. `out`
 * receives a handle to be released with [`lyapem_system_free`].
 */
enum LyapemStatus lyapem_system_new(size_t dim,
                                    size_t m,
                                    const double *weights,
                                    const double *covariances,
                                    const double *prior_means,
                                    const double *prior_covariances,
                                    const double *data,
                                    size_t n,
                                    struct LyapemSystem **out);

/**
 * Release a handle from [`lyapem_system_new`]. Null is a no-op.
 *
 * # Safety
 * `sys` must be null or a live handle; it must not be used afterwards.
 */
void lyapem_system_free(struct LyapemSystem *sys);

/**
 * Length of a parameter vector (`m·dim`), or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t lyapem_state_dim(const struct LyapemSystem *sys);

/**
 * One MAP-EM step: `out = F(theta)`. Both buffers have `len` entries.
 *
 * # Safety
 * `theta` and `out` must reference `len` doubles.
 */
enum LyapemStatus lyapem_step(const struct LyapemSystem *sys,
                              const double *theta,
                              size_t len,
                              double *out);

/**
 * `log p(theta | y)` up to a constant.
 *
 * # Safety
 * `theta` must reference `len` doubles and `out` one double.
 */
enum LyapemStatus lyapem_log_posterior(const struct LyapemSystem *sys,
                                       const double *theta,
                                       size_t len,
                                       double *out);

/**
 * KL divergence from the responsibilities at `theta_hat` to those at `theta`.
 *
 * # Safety
 * `theta` and `theta_hat` must reference `len` doubles and `out` one double.
 */
enum LyapemStatus lyapem_latent_kl(const struct LyapemSystem *sys,
                                   const double *theta,
                                   const double *theta_hat,
                                   size_t len,
                                   double *out);

/**
 * Iterate from `init` until the step norm drops to `step_tol` or
 * `max_iters` steps have been taken. Writes the terminal point to `out` and
 * the step count to `iterations` (which may be null).
 *
 * # Safety
 * `init` and `out` must reference `len` doubles.
 */
enum LyapemStatus lyapem_run_em(const struct LyapemSystem *sys,
                                const double *init,
                                size_t len,
                                size_t max_iters,
                                double step_tol,
                                double *out,
                                size_t *iterations);

/**
 * Classify `theta_star` from sampled trajectories with the default probe
 * settings and the given seed. `rho_hat` receives the estimated contraction
 * factor, or NaN when none could be estimated.
 *
 * # Safety
 * `theta_star` must reference `len` doubles; `verdict` and `rho_hat` must
 * be writable.
 */
enum LyapemStatus lyapem_classify(const struct LyapemSystem *sys,
                                  const double *theta_star,
                                  size_t len,
                                  uint64_t seed,
                                  enum LyapemVerdict *verdict,
                                  double *rho_hat);

/**
 * Run the default prior-strength sweep (`0.15, 0.1, 0.05`, then flat) and
 * write the median rate per setting to `medians` (4 entries, NaN where no
 * rate was available).
 *
 * # Safety
 * `medians` must reference `len` doubles.
 */
enum LyapemStatus lyapem_fig1_medians(uint64_t seed, size_t trials, double *medians, size_t len);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or reference `cap` writable bytes.
 */
size_t lyapem_last_error(char *buf, size_t cap);

/**
 * ABI version of this library.
 */
int lyapem_abi_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LYAPEM_H */
