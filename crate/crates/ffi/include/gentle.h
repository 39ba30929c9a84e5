#ifndef GENTLE_H
#define GENTLE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. Codes 1 to 3 match the CLI exit codes.
 */
typedef enum GentleStatus {
  GENTLE_STATUS_OK = 0,
  GENTLE_STATUS_RUNTIME = 1,
  GENTLE_STATUS_CONFIG = 2,
  GENTLE_STATUS_MISSING_INPUT = 3,
  GENTLE_STATUS_NULL_POINTER = 4,
  GENTLE_STATUS_INVALID_ARGUMENT = 5,
  GENTLE_STATUS_PANIC = 6,
} GentleStatus;

/**
 * Trained context encoder of a run.
 */
typedef struct GentleEncoder GentleEncoder;

/**
 * Trained deterministic actor of a run.
 */
typedef struct GentlePolicy GentlePolicy;

/**
 * Hidden parameters of one task plus its environment settings.
 */
typedef struct GentleTask GentleTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gentle_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gentle_version(void);

/**
 * PointRobot task with its goal in `[-1, 1]^2`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum GentleStatus gentle_task_new_point_robot(double goal_x,
                                              double goal_y,
                                              struct GentleTask **out);

/**
 * PointMassParams task with damping and mass multipliers in `[1.5^-3, 1.5^3]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum GentleStatus gentle_task_new_point_mass_params(double damping_mult,
                                                    double mass_mult,
                                                    struct GentleTask **out);

/**
 * # Safety
 * `task` must be NULL or a handle from a `gentle_task_new_*` call, freed once.
 */
void gentle_task_free(struct GentleTask *task);

/**
 * # Safety
 * `task` must be NULL or a live task handle.
 */
size_t gentle_task_state_dim(const struct GentleTask *task);

/**
 * # Safety
 * `task` must be NULL or a live task handle.
 */
size_t gentle_task_action_dim(const struct GentleTask *task);

/**
 * Episode length in steps.
 *
 * # Safety
 * `task` must be NULL or a live task handle.
 */
size_t gentle_task_horizon(const struct GentleTask *task);

/**
 * Draws an initial state from the family's start distribution.
 *
 * # Safety
 * `task` must be a live handle; `state_out` must point to `state_len` writable doubles.
 */
enum GentleStatus gentle_task_reset(const struct GentleTask *task,
                                    uint64_t seed,
                                    double *state_out,
                                    size_t state_len);

/**
 * One environment step; actions outside the bound are clipped.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `reward_out` one writable double.
 */
enum GentleStatus gentle_task_step(const struct GentleTask *task,
                                   const double *state,
                                   size_t state_len,
                                   const double *action,
                                   size_t action_len,
                                   double *next_state_out,
                                   double *reward_out);

/**
 * Loads the encoder of a `train` output directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `out` valid storage for one handle.
 */
enum GentleStatus gentle_encoder_load(const char *run_dir, struct GentleEncoder **out);

/**
 * # Safety
 * `encoder` must be NULL or a handle from `gentle_encoder_load`, freed once.
 */
void gentle_encoder_free(struct GentleEncoder *encoder);

/**
 * # Safety
 * `encoder` must be NULL or a live encoder handle.
 */
size_t gentle_encoder_latent_dim(const struct GentleEncoder *encoder);

/**
 * Encodes `n` transitions into a task latent. `states`, `next_states` are
 * row-major `n x state_dim`, `actions` is `n x action_dim`, `rewards` has
 * `n` entries. `n = 0` yields the zero prior.
 *
 * # Safety
 * Arrays must hold the sizes above; `z_out` must point to `z_len` writable doubles.
 */
enum GentleStatus gentle_encoder_encode(const struct GentleEncoder *encoder,
                                        const double *states,
                                        const double *actions,
                                        const double *next_states,
                                        const double *rewards,
                                        size_t n,
                                        double *z_out,
                                        size_t z_len);

/**
 * Loads the actor of a `train` output directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `out` valid storage for one handle.
 */
enum GentleStatus gentle_policy_load(const char *run_dir, struct GentlePolicy **out);

/**
 * # Safety
 * `policy` must be NULL or a handle from `gentle_policy_load`, freed once.
 */
void gentle_policy_free(struct GentlePolicy *policy);

/**
 * # Safety
 * `policy` must be NULL or a live policy handle.
 */
size_t gentle_policy_state_dim(const struct GentlePolicy *policy);

/**
 * # Safety
 * `policy` must be NULL or a live policy handle.
 */
size_t gentle_policy_action_dim(const struct GentlePolicy *policy);

/**
 * # Safety
 * `policy` must be NULL or a live policy handle.
 */
size_t gentle_policy_latent_dim(const struct GentlePolicy *policy);

/**
 * Deterministic action for `state` under task latent `z`.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum GentleStatus gentle_policy_act(const struct GentlePolicy *policy,
                                    const double *state,
                                    size_t state_len,
                                    const double *z,
                                    size_t z_len,
                                    double *action_out,
                                    size_t action_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENTLE_H */
