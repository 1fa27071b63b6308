/* C interface to the auction simulator and metric core.
 *
 * Maintained by hand; keep in sync with crates/ffi/src/lib.rs.
 *
 * Conventions:
 *  - Functions returning `int` use the AUTOBID_* status codes below.
 *  - On any failure, autobid_last_error_message() returns a human-readable
 *    message valid until the next failing call on the same thread.
 *  - Handles are opaque; free them with autobid_env_free exactly once.
 */
#ifndef AUTOBID_H
#define AUTOBID_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define AUTOBID_OK 0
#define AUTOBID_ERR_NULL_POINTER 1
#define AUTOBID_ERR_CONFIG 2
#define AUTOBID_ERR_INVALID_ARGUMENT 3
#define AUTOBID_ERR_EPISODE_FINISHED 4
#define AUTOBID_ERR_UTF8 5
#define AUTOBID_ERR_INTERNAL 6

/* Opaque simulator episode handle. */
typedef struct AutobidEnv AutobidEnv;

/* Episode metrics snapshot; layout is part of the ABI. */
typedef struct AutobidMetrics {
    double conversions;
    double budget_utilization;
    double cpa_ratio;
    double penalty;
    double score;
} AutobidMetrics;

/* Static NUL-terminated library version string. */
const char *autobid_version(void);

/* Number of features in a state vector. */
int autobid_state_dim(void);

/* Message for the most recent error on this thread. */
const char *autobid_last_error_message(void);

/* New episode under the default configuration with the given RNG seed.
 * Returns NULL on failure (see autobid_last_error_message). */
AutobidEnv *autobid_env_new(uint64_t seed);

/* New episode from a JSON configuration document (same schema as the
 * "simulator" section of the run configuration). Writes the handle to
 * *out_env on success. */
int autobid_env_new_json(const char *config_json, AutobidEnv **out_env);

/* Release an episode handle. NULL is a no-op. */
void autobid_env_free(AutobidEnv *env);

/* Advance one decision interval with the given scalar action. Writes the
 * interval reward (conversions) to *out_reward when out_reward is non-NULL.
 * Returns AUTOBID_ERR_EPISODE_FINISHED once all intervals have run. */
int autobid_env_step(AutobidEnv *env, double action, double *out_reward);

/* Copy the current state vector into out (capacity len, which must be at
 * least autobid_state_dim()). */
int autobid_env_state(const AutobidEnv *env, double *out, size_t len);

/* Cumulative spend so far; NaN if env is NULL. */
double autobid_env_spent(const AutobidEnv *env);

/* Cumulative conversions so far; NaN if env is NULL. */
double autobid_env_conversions(const AutobidEnv *env);

/* Episode metrics for the intervals executed so far. */
int autobid_env_metrics(const AutobidEnv *env, AutobidMetrics *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* AUTOBID_H */
