#ifndef BDLM_H
#define BDLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum BdlmStatus {
  BdlmOk = 0,
  /**
   * A required pointer argument was null.
   */
  BdlmNullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  BdlmInvalidUtf8 = 2,
  /**
   * The operation itself failed; see bdlm_last_error().
   */
  BdlmFailed = 3,
} BdlmStatus;

/**
 * Opaque model handle.
 */
typedef struct BdlmModel BdlmModel;

/**
 * Opaque handle to a running rollout service.
 */
typedef struct BdlmServer BdlmServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. Valid until the next
 * failing call; never null.
 */
const char *bdlm_last_error(void);

/**
 * Loads a checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum BdlmStatus bdlm_model_load(const char *path, struct BdlmModel **out);

/**
 * Saves the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from bdlm_model_load; `path` must be a valid C string.
 */
enum BdlmStatus bdlm_model_save(const struct BdlmModel *model, const char *path);

/**
 * Frees a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from bdlm_model_load and not be used afterwards.
 */
void bdlm_model_free(struct BdlmModel *model);

/**
 * Generates from a token prompt and returns the trajectory as a JSON
 * string via `out_json`; free it with bdlm_string_free. `dynamic_mode`
 * 0 decodes one token per step, nonzero uses threshold decoding.
 *
 * # Safety
 * `prompt` must point to `prompt_len` readable u32 values; `out_json`
 * must be a valid pointer.
 */
enum BdlmStatus bdlm_generate(const struct BdlmModel *model,
                              const uint32_t *prompt,
                              uintptr_t prompt_len,
                              int32_t dynamic_mode,
                              float threshold,
                              float temperature,
                              uintptr_t max_new_tokens,
                              uint64_t seed,
                              char **out_json);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from a bdlm_* call and not be used afterwards.
 */
void bdlm_string_free(char *s);

/**
 * Starts a rollout service for the checkpoint on `addr`
 * (e.g. "127.0.0.1:7431"; port 0 picks one). The bound address is
 * returned via `out_addr` (free with bdlm_string_free).
 *
 * # Safety
 * All pointer arguments must be valid; strings must be C strings.
 */
enum BdlmStatus bdlm_server_start(const char *checkpoint,
                                  const char *addr,
                                  struct BdlmServer **out_server,
                                  char **out_addr);

/**
 * Stops the service and frees the handle. Null is a no-op.
 *
 * # Safety
 * `server` must come from bdlm_server_start and not be used afterwards.
 */
void bdlm_server_stop(struct BdlmServer *server);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDLM_H */
