#ifndef MOPDRIVE_H
#define MOPDRIVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_IO = 3,
  MD_STATUS_EPISODE_DONE = 4,
  MD_STATUS_BUFFER_TOO_SMALL = 5,
  MD_STATUS_INTERNAL = 99,
} MdStatus;

// Loaded transition dataset.
typedef struct MdDataset MdDataset;

// Simulator instance.
typedef struct MdEnv MdEnv;

// Loaded Q-network checkpoint.
typedef struct MdPolicy MdPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated).
// `needed` receives the required capacity including the terminator; it is 0
// when no error was recorded.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_last_error(char *buf, size_t cap, size_t *needed);

// Static NUL-terminated version string.
const char *md_version(void);

// Creates a simulator for an id such as `lane-3-density-2`, reset with `seed`.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_env_new(const char *env_id, uint64_t seed, struct MdEnv **out);

// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
void md_env_free(struct MdEnv *env);

// Number of doubles in one observation (vehicles × features).
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_env_obs_len(const struct MdEnv *env, size_t *out);

// Starts a new episode and writes its first observation.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_env_reset(struct MdEnv *env, uint64_t seed, double *obs, size_t len);

// Current observation without stepping.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_env_observe(const struct MdEnv *env, double *obs, size_t len);

// Applies meta-action `action` (0 lane_left, 1 idle, 2 lane_right, 3 faster,
// 4 slower). Returns `EpisodeDone` without stepping once the episode ended.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_env_step(struct MdEnv *env,
                          uint32_t action,
                          double *obs,
                          size_t len,
                          double *reward,
                          bool *done);

// Loads a checkpoint written by the trainer.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_policy_load(const char *path, struct MdPolicy **out);

// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
void md_policy_free(struct MdPolicy *policy);

// Q-values of one observation; `q` must hold at least 5 doubles.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_policy_q_values(const struct MdPolicy *policy,
                                 const double *obs,
                                 size_t len,
                                 double *q,
                                 size_t q_len);

// Greedy action of one observation.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_policy_act(const struct MdPolicy *policy,
                            const double *obs,
                            size_t len,
                            uint32_t *action);

// Loads and verifies a dataset file.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_dataset_load(const char *path, struct MdDataset **out);

// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
void md_dataset_free(struct MdDataset *dataset);

// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_dataset_len(const struct MdDataset *dataset, size_t *out);

// Copies transition `index`: state and next state into buffers of `len`
// doubles each, plus action, reward and terminal flag.
//
// # Safety
// Pointer arguments must be null or valid for the access described above;
// handles must come from the matching constructor and not be freed yet.
enum MdStatus md_dataset_get(const struct MdDataset *dataset,
                             size_t index,
                             double *s,
                             double *s_next,
                             size_t len,
                             uint32_t *action,
                             double *reward,
                             bool *done);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOPDRIVE_H */
