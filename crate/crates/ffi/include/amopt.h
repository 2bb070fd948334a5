/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef AMOPT_H
#define AMOPT_H

/* Generated with cbindgen:0.29.4 */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Result codes shared by every exported function.
 */
typedef enum AmoptStatus {
  AMOPT_STATUS_OK = 0,
  AMOPT_STATUS_NULL_POINTER = 1,
  AMOPT_STATUS_INVALID_ARGUMENT = 2,
  AMOPT_STATUS_CONFIG = 3,
  AMOPT_STATUS_INCOMPATIBLE = 4,
  AMOPT_STATUS_IO = 5,
  AMOPT_STATUS_NUMERICAL = 6,
  AMOPT_STATUS_PANIC = 7,
  AMOPT_STATUS_INTERNAL = 8,
} AmoptStatus;

/**
 * An agent plus the configuration it acts under.
 */
typedef struct AmoptAgent AmoptAgent;

/**
 * A validated run configuration.
 */
typedef struct AmoptConfig AmoptConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *amopt_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *amopt_last_error(void);

/**
 * Parses and validates a TOML run configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmoptStatus amopt_config_from_toml(const char *toml, struct AmoptConfig **out);

/**
 * # Safety
 * `config` must come from [`amopt_config_from_toml`] or be NULL.
 */
void amopt_config_free(struct AmoptConfig *config);

/**
 * Builds an untrained agent for `config`.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum AmoptStatus amopt_agent_new(const struct AmoptConfig *config, struct AmoptAgent **out);

/**
 * Runs a full training job. `out_dir` may be NULL to skip writing files.
 *
 * # Safety
 * `config` must be a live handle, `out_dir` NULL or a NUL-terminated
 * string, and `out` a valid pointer.
 */
enum AmoptStatus amopt_train(const struct AmoptConfig *config,
                             const char *out_dir,
                             struct AmoptAgent **out);

/**
 * Restores an agent from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmoptStatus amopt_agent_load(const char *path, struct AmoptAgent **out);

/**
 * Writes `agent` to a checkpoint file.
 *
 * # Safety
 * `agent` must be a live handle and `path` a NUL-terminated string.
 */
enum AmoptStatus amopt_agent_save(const struct AmoptAgent *agent, const char *path);

/**
 * # Safety
 * `agent` must come from this library or be NULL.
 */
void amopt_agent_free(struct AmoptAgent *agent);

/**
 * Observation and action sizes of the agent's environment.
 *
 * # Safety
 * `agent` must be a live handle; the out pointers must be valid.
 */
enum AmoptStatus amopt_agent_dims(const struct AmoptAgent *agent,
                                  size_t *obs_dim,
                                  size_t *action_dim);

/**
 * Chooses an action for one observation. With `deterministic` the squashed
 * mean is returned, otherwise one sample drawn from a generator seeded
 * with `seed`. Iterative agents also use `seed` for their inner noise.
 *
 * # Safety
 * `obs` must point to `obs_len` doubles and `action` to `action_len`
 * writable doubles.
 */
enum AmoptStatus amopt_agent_act(const struct AmoptAgent *agent,
                                 const double *obs,
                                 size_t obs_len,
                                 bool deterministic,
                                 uint64_t seed,
                                 double *action,
                                 size_t action_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMOPT_H */
