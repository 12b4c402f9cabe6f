#ifndef ABACUS_RL_H
#define ABACUS_RL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum AbacusStatus {
  ABACUS_STATUS_OK = 0,
  ABACUS_STATUS_NULL_POINTER = 1,
  ABACUS_STATUS_INVALID_ARGUMENT = 2,
  ABACUS_STATUS_ILLEGAL_ACTION = 3,
  ABACUS_STATUS_EPISODE_FINISHED = 4,
  ABACUS_STATUS_BUFFER_TOO_SMALL = 5,
  ABACUS_STATUS_IO = 6,
  ABACUS_STATUS_CHECKPOINT = 7,
  ABACUS_STATUS_INTERNAL = 8,
} AbacusStatus;

// Opaque environment handle.
typedef struct AbacusEnvHandle AbacusEnvHandle;

// Opaque policy handle.
typedef struct AbacusPolicyHandle AbacusPolicyHandle;

// Outcome of one environment step.
typedef struct AbacusStepOut {
  double reward;
  // 1 when the episode ended with this step.
  uint8_t done;
  // Termination cause code (see [`abacus_cause_name`]), or -1.
  int32_t cause;
  uint64_t operations_completed;
  uint32_t budget_remaining;
} AbacusStepOut;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string and returns the message length (excluding the
// NUL). Truncates when `len` is too small. `buf` may be null to query
// the length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
uintptr_t abacus_last_error(char *buf, uintptr_t len);

// Static name of a termination cause code, or null if out of range.
const char *abacus_cause_name(int32_t code);

// Flat observation length: 3 frames × 6 rows × 2 columns × 3 channels.
uintptr_t abacus_observation_len(void);

// Creates an environment. `task`: 0 add, 1 sub, 2 both. `preset`: 0
// dense, 1 no finger shaping, 2 no finger shaping and no signpost reward.
//
// # Safety
// `out` must be valid for one pointer write.
enum AbacusStatus abacus_env_new(uintptr_t columns,
                                 uintptr_t min_len,
                                 uintptr_t max_len,
                                 uint32_t task,
                                 uint32_t preset,
                                 uint64_t seed,
                                 struct AbacusEnvHandle **out);

// Releases an environment. Null is ignored.
//
// # Safety
// `h` must come from [`abacus_env_new`] and not be used afterwards.
void abacus_env_free(struct AbacusEnvHandle *h);

// Starts a new sampled episode.
//
// # Safety
// `h` must be a live environment handle.
enum AbacusStatus abacus_env_reset(struct AbacusEnvHandle *h);

// Starts an episode that runs exactly the given operations, written in
// base 5 and comma separated, e.g. `"+1234,-402"`.
//
// # Safety
// `h` must be a live environment handle and `ops` a NUL-terminated string.
enum AbacusStatus abacus_env_reset_scripted(struct AbacusEnvHandle *h, const char *ops);

// Applies action `action` (0..8). `out` may be null.
//
// # Safety
// `h` must be a live environment handle; `out` null or valid for writes.
enum AbacusStatus abacus_env_step(struct AbacusEnvHandle *h,
                                  uint32_t action,
                                  struct AbacusStepOut *out);

// Writes the stacked observation (oldest frame first) into `buf`, which
// must hold at least [`abacus_observation_len`] floats.
//
// # Safety
// `h` must be a live environment handle and `buf` valid for `len` floats.
enum AbacusStatus abacus_env_observe(struct AbacusEnvHandle *h, float *buf, uintptr_t len);

// Writes the 9-float symbol encoding into `buf`.
//
// # Safety
// `h` must be a live environment handle and `buf` valid for `len` floats.
enum AbacusStatus abacus_env_symbol(struct AbacusEnvHandle *h, float *buf, uintptr_t len);

// Writes 8 bytes, 1 for each legal action.
//
// # Safety
// `h` must be a live environment handle and `buf` valid for `len` bytes.
enum AbacusStatus abacus_env_mask(struct AbacusEnvHandle *h, uint8_t *buf, uintptr_t len);

// The scripted solver's next action.
//
// # Safety
// `h` must be a live environment handle and `action` valid for writes.
enum AbacusStatus abacus_env_prescription(struct AbacusEnvHandle *h, uint32_t *action);

// Board value as a NUL-terminated decimal string. Writes the full length
// (excluding the NUL) to `needed`; fails with `BufferTooSmall` if `len`
// cannot hold it.
//
// # Safety
// `h` must be a live environment handle, `buf` valid for `len` bytes and
// `needed` null or valid for writes.
enum AbacusStatus abacus_env_value(struct AbacusEnvHandle *h,
                                   char *buf,
                                   uintptr_t len,
                                   uintptr_t *needed);

// Loads a trained policy from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum AbacusStatus abacus_policy_load(const char *path,
                                     uint8_t greedy,
                                     uint64_t seed,
                                     struct AbacusPolicyHandle **out);

// Releases a policy. Null is ignored.
//
// # Safety
// `h` must come from [`abacus_policy_load`] and not be used afterwards.
void abacus_policy_free(struct AbacusPolicyHandle *h);

// Picks an action for the environment's current state. `prev_action` is
// the previous action of this episode, or -1 on its first step.
//
// # Safety
// Both handles must be live and `action` valid for writes.
enum AbacusStatus abacus_policy_act(struct AbacusPolicyHandle *p,
                                    struct AbacusEnvHandle *h,
                                    int32_t prev_action,
                                    uint32_t *action);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABACUS_RL_H */
