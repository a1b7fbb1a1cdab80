#ifndef ANYLEVEL_H
#define ANYLEVEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlStatus {
  AL_STATUS_OK = 0,
  AL_STATUS_NULL_POINTER = 1,
  AL_STATUS_INVALID_ARGUMENT = 2,
  AL_STATUS_INVALID_LAYOUT = 3,
  AL_STATUS_IO = 4,
  AL_STATUS_FORMAT = 5,
  AL_STATUS_BUFFER_TOO_SMALL = 6,
  AL_STATUS_INTERNAL = 7,
} AlStatus;

// An RGB image with values in [-1, 1].
typedef struct AlImage AlImage;

// A parsed layout document.
typedef struct AlLayout AlLayout;

// A loaded checkpoint.
typedef struct AlModel AlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *al_version(void);

// Copies the calling thread's last error message, NUL-terminated, into
// `buf`. Returns the message length excluding the terminator; the copy is
// truncated when `len` is too small.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t al_last_error_message(char *buf, uintptr_t len);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AlStatus al_model_load(const char *path, struct AlModel **out);

// # Safety
// `model` must be null or come from [`al_model_load`], and is invalid afterwards.
void al_model_free(struct AlModel *model);

// Canvas side length `2^L` in pixels, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t al_model_side(const struct AlModel *model);

// Number of concepts in the model's vocabulary, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t al_model_concept_count(const struct AlModel *model);

// Copies concept `index`'s name, NUL-terminated, into `buf`; `written`
// receives the needed size including the terminator.
//
// # Safety
// `model` must be a live handle, `buf` null or `len` writable bytes,
// `written` null or valid.
enum AlStatus al_model_concept_name(const struct AlModel *model,
                                    uintptr_t index,
                                    char *buf,
                                    uintptr_t len,
                                    uintptr_t *written);

// Parses a layout document (JSON with run-length masks).
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum AlStatus al_layout_from_json(const char *json, struct AlLayout **out);

// # Safety
// `layout` must be null or come from [`al_layout_from_json`].
void al_layout_free(struct AlLayout *layout);

// Checks the layout against the model; [`AlStatus::InvalidLayout`] with
// the violations in the error message when it does not fit.
//
// # Safety
// Both handles must be live.
enum AlStatus al_layout_validate(const struct AlModel *model, const struct AlLayout *layout);

// Draws image `index` of the batch seeded by `seed`. A negative `level`
// keeps each region's own precision; otherwise every region is set to it.
// `ancestral` selects the stochastic sampler instead of the deterministic one.
//
// # Safety
// Both handles must be live and `out` a valid pointer.
enum AlStatus al_sample(const struct AlModel *model,
                        const struct AlLayout *layout,
                        int32_t level,
                        double guidance_scale,
                        uint32_t steps,
                        bool ancestral,
                        uint64_t seed,
                        uint64_t index,
                        struct AlImage **out);

// # Safety
// `image` must be null or come from [`al_sample`].
void al_image_free(struct AlImage *image);

// Width in pixels, or 0 for a null handle. Images are square.
//
// # Safety
// `image` must be null or a live handle.
uint32_t al_image_side(const struct AlImage *image);

// Copies interleaved 8-bit RGB rows into `buf`; `written` receives
// `3 * side * side`.
//
// # Safety
// `image` must be live, `buf` null or `len` writable bytes, `written` null or valid.
enum AlStatus al_image_rgb8(const struct AlImage *image,
                            uint8_t *buf,
                            uintptr_t len,
                            uintptr_t *written);

// Writes the image as a lossless PNG.
//
// # Safety
// `image` must be live and `path` a NUL-terminated string.
enum AlStatus al_image_write_png(const struct AlImage *image, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANYLEVEL_H */
