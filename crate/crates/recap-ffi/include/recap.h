/* C interface for the recap caption-to-image pipeline. */

#ifndef RECAP_FFI_H
#define RECAP_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
#define RECAP_OK 0

#define RECAP_ERR_INVALID_ARGUMENT 1

#define RECAP_ERR_CHECKPOINT 2

#define RECAP_ERR_RUNTIME 3

/**
 * Opaque handle: a loaded model plus everything needed to run it.
 */
typedef struct RecapModel RecapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *recap_last_error(void);

/**
 * Loads a checkpoint directory into a new handle. On success writes the
 * handle through `out` and returns RECAP_OK; the handle must be released
 * with `recap_model_free`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int recap_model_load(const char *dir, struct RecapModel **out);

/**
 * Releases a handle returned by `recap_model_load`. NULL is a no-op.
 *
 * # Safety
 * `handle` must come from `recap_model_load` and not be used afterwards.
 */
void recap_model_free(struct RecapModel *handle);

/**
 * Side length in pixels of the finest generated image.
 *
 * # Safety
 * `handle` must be a live handle from `recap_model_load`.
 */
uintptr_t recap_image_side(const struct RecapModel *handle);

/**
 * Generates the finest-stage image for a caption into a caller buffer of
 * interleaved RGB bytes (3 * side * side, row major).
 *
 * # Safety
 * `caption` must be NUL-terminated; `pixels` must point to at least
 * `pixels_len` writable bytes.
 */
int recap_generate(const struct RecapModel *handle,
                   const char *caption,
                   uint64_t seed,
                   uint8_t *pixels,
                   uintptr_t pixels_len);

/**
 * Generates an image for the caption, then decodes the frozen captioner's
 * description of it into `text` (NUL-terminated, truncated to fit).
 * Requires a checkpoint that carries captioner weights.
 *
 * # Safety
 * `caption` must be NUL-terminated; `text` must point to at least
 * `text_len` writable bytes.
 */
int recap_redescribe(const struct RecapModel *handle,
                     const char *caption,
                     uint64_t seed,
                     char *text,
                     uintptr_t text_len);

/**
 * Swaps one attribute word (`field` in shape|color|bg_color|size|position)
 * and reports through `followed` whether the oracle sees the new value in
 * the regenerated image.
 *
 * # Safety
 * String arguments must be NUL-terminated; `followed` must be a valid
 * pointer.
 */
int recap_probe(const struct RecapModel *handle,
                const char *caption,
                const char *field,
                const char *value,
                uint64_t seed,
                bool *followed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* RECAP_FFI_H */
