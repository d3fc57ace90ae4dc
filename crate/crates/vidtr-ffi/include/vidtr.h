/* C interface to the vidtr video transformer library. */

#ifndef VIDTR_H
#define VIDTR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum VidtrStatus {
  VidtrStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  VidtrStatus_NullPointer = 1,
  /**
   * Bad configuration value, unknown preset or wrong buffer size.
   */
  VidtrStatus_InvalidArgument = 2,
  /**
   * The operation is not defined for this model.
   */
  VidtrStatus_Unsupported = 3,
  /**
   * A checkpoint file failed to parse or did not match its config.
   */
  VidtrStatus_Corrupt = 4,
  /**
   * The underlying file could not be read or written.
   */
  VidtrStatus_Io = 5,
  /**
   * Unexpected internal failure.
   */
  VidtrStatus_Internal = 6,
} VidtrStatus;

/**
 * Opaque model handle.
 */
typedef struct VidtrModel VidtrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty
 * string if the last call succeeded. The pointer stays valid until the
 * next vidtr call on the same thread.
 */
const char *vidtr_last_error_message(void);

/**
 * Builds a model from a named preset (`toy`, `vidtr-s`, `vidtr-m`,
 * `vidtr-l`, `c-vidtr-s`, `c-vidtr-m`) with seeded deterministic
 * initialization, writing the new handle through `out`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum VidtrStatus vidtr_model_build_preset(const char *name, uint64_t seed, struct VidtrModel **out);

/**
 * Loads a checkpoint written by `vidtr_model_save` (or the CLI).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum VidtrStatus vidtr_model_load(const char *path, struct VidtrModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from a vidtr build/load call; `path` must be a
 * NUL-terminated string.
 */
enum VidtrStatus vidtr_model_save(const struct VidtrModel *model, const char *path);

/**
 * Releases a handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call, and
 * must not be used afterwards.
 */
void vidtr_model_free(struct VidtrModel *model);

/**
 * Frames per input clip; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_clip_len(const struct VidtrModel *model);

/**
 * Input frame width in pixels; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_frame_width(const struct VidtrModel *model);

/**
 * Input frame height in pixels; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_frame_height(const struct VidtrModel *model);

/**
 * Input channels per frame; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_channels(const struct VidtrModel *model);

/**
 * Number of output classes; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_class_count(const struct VidtrModel *model);

/**
 * Total learnable parameter count; 0 if the handle is null.
 *
 * # Safety
 * `model` must be null or a handle from a vidtr build/load call.
 */
uint64_t vidtr_model_param_count(const struct VidtrModel *model);

/**
 * Runs one forward pass. `clip` holds channels x frames x width x height
 * values in row-major order (exactly `vidtr_model_channels * clip_len *
 * frame_width * frame_height` floats); `logits` receives
 * `vidtr_model_class_count` values.
 *
 * # Safety
 * `model` must come from a vidtr build/load call; `clip` and `logits`
 * must point to buffers of at least `clip_len`/`logits_len` floats.
 */
enum VidtrStatus vidtr_model_forward(const struct VidtrModel *model,
                                     const float *clip,
                                     uintptr_t clip_len,
                                     float *logits,
                                     uintptr_t logits_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* VIDTR_H */
