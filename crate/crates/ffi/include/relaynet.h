#ifndef RELAYNET_H
#define RELAYNET_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum RelaynetCode
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  RELAYNET_CODE_OK = 0,
  RELAYNET_CODE_NULL_POINTER = 1,
  RELAYNET_CODE_INVALID_ARGUMENT = 2,
  RELAYNET_CODE_CONFIG = 3,
  RELAYNET_CODE_RUNTIME = 4,
  RELAYNET_CODE_BUFFER_TOO_SMALL = 5,
  RELAYNET_CODE_PANIC = 6,
};
#ifndef __cplusplus
typedef int32_t RelaynetCode;
#endif // __cplusplus

enum RelaynetStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  RELAYNET_STATUS_RUNNING = 0,
  RELAYNET_STATUS_SUCCESS = 1,
  RELAYNET_STATUS_TIMEOUT = 2,
  RELAYNET_STATUS_STALLED = 3,
};
#ifndef __cplusplus
typedef int32_t RelaynetStatus;
#endif // __cplusplus

/**
 * Opaque simulator handle.
 */
typedef struct RelaynetWorld RelaynetWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a world. `config_toml` may be NULL for the built-in defaults.
 *
 * # Safety
 * `config_toml` must be NULL or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
RelaynetCode relaynet_world_new(const char *config_toml, uint64_t seed, struct RelaynetWorld **out);

/**
 * Releases a world; NULL is ignored.
 *
 * # Safety
 * `world` must be NULL or a handle from [`relaynet_world_new`] not yet freed.
 */
void relaynet_world_free(struct RelaynetWorld *world);

/**
 * Number of agents currently deployed.
 *
 * # Safety
 * `world` must be a live handle and `out` a valid pointer.
 */
RelaynetCode relaynet_world_agent_count(const struct RelaynetWorld *world, size_t *out);

/**
 * Advances one step. `moves[i]` is agent `i`'s move (0 up, 1 down, 2 left,
 * 3 right, 4 stay) and `requests[i]` nonzero asks for a new agent; `n`
 * must equal the agent count. `reward` and `status` are optional.
 *
 * # Safety
 * `world` must be a live handle; `moves` and `requests` must point to `n`
 * bytes each.
 */
RelaynetCode relaynet_world_step(struct RelaynetWorld *world,
                                 const uint8_t *moves,
                                 const uint8_t *requests,
                                 size_t n,
                                 double *reward,
                                 RelaynetStatus *status);

/**
 * Writes the world state as JSON. With `buf` NULL or too small, returns
 * `BufferTooSmall` and stores the required size in `out_len`.
 *
 * # Safety
 * `world` must be a live handle; `buf` must hold `cap` bytes.
 */
RelaynetCode relaynet_world_snapshot(const struct RelaynetWorld *world,
                                     char *buf,
                                     size_t cap,
                                     size_t *out_len);

/**
 * Shannon capacity in bit/s of a link spanning `distance_m` metres under
 * the default channel.
 *
 * # Safety
 * `out_bps` must be a valid pointer.
 */
RelaynetCode relaynet_channel_capacity(double distance_m, double *out_bps);

/**
 * Message of the last failed call on this thread; empty if none. Does
 * not itself replace the message.
 *
 * # Safety
 * `buf` must hold `cap` bytes; `out_len` may be NULL.
 */
RelaynetCode relaynet_last_error(char *buf, size_t cap, size_t *out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* RELAYNET_H */
