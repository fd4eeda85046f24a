#ifndef DIT_FFI_H
#define DIT_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `DIT_STATUS_OK` is zero.
typedef enum DitStatus {
  DIT_STATUS_OK = 0,
  DIT_STATUS_NULL_POINTER = 1,
  DIT_STATUS_INVALID_ARGUMENT = 2,
  DIT_STATUS_DIMENSION = 3,
  DIT_STATUS_PARSE = 4,
  DIT_STATUS_VERSION = 5,
  DIT_STATUS_IO = 6,
  DIT_STATUS_CONTRACT = 7,
  DIT_STATUS_PANIC = 8,
} DitStatus;

typedef enum DitSampleMode {
  DIT_SAMPLE_MODE_FULL = 0,
  DIT_SAMPLE_MODE_PARTIAL = 1,
} DitSampleMode;

// Opaque model handle: denoiser, codec, semantic encoder and schedule.
typedef struct DitModel DitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dit_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *dit_last_error_message(void);

// Load a trained model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DitStatus dit_model_load(const char *path, struct DitModel **out);

// Untrained model (identity codec) from `key = value` config text; keys not
// given take the desk defaults. An empty string selects the defaults.
//
// # Safety
// `config_text` must be a NUL-terminated string; `out` must be writable.
enum DitStatus dit_model_new(const char *config_text, struct DitModel **out);

// Release a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void dit_model_free(struct DitModel *model);

// Side length of the images the model translates, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t dit_model_image_size(const struct DitModel *model);

// Number of diffusion timesteps, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t dit_model_timesteps(const struct DitModel *model);

// Number of scalar parameters of the denoiser, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t dit_model_parameter_count(const struct DitModel *model);

// Translate one source image. `t_start` is used in partial mode only;
// pass 0 there to get the default `3T/4`. The output depends only on the
// model, the source, `seed` and the mode.
//
// # Safety
// `source` and `output` must each hold `len` doubles, `len = 3·S·S`.
enum DitStatus dit_model_sample(const struct DitModel *model,
                                const double *source,
                                double *output,
                                size_t len,
                                enum DitSampleMode mode,
                                size_t t_start,
                                uint64_t seed);

// Render synthetic pair `sample_id` of dataset `seed` at side `size`.
//
// # Safety
// `source` and `target` must each hold `len = 3·size·size` doubles.
enum DitStatus dit_generate_pair(uint64_t seed,
                                 uint64_t sample_id,
                                 size_t size,
                                 double *source,
                                 double *target,
                                 size_t len);

// PSNR in dB with peak 2 (capped at 99 for identical inputs).
//
// # Safety
// `a` and `b` must hold `len` doubles; `out` must be writable.
enum DitStatus dit_psnr(const double *a, const double *b, size_t len, double *out);

// Write the model (with optimizer state) as a checkpoint file.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum DitStatus dit_model_save(const struct DitModel *model, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIT_FFI_H */
