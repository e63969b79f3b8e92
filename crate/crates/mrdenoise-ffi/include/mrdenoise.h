#ifndef MRDENOISE_H
#define MRDENOISE_H

/* Generated by cbindgen from mrdenoise-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every API call.
 */
typedef enum MrdStatus {
  MrdOk = 0,
  /**
   * A parameter or combination of parameters is invalid.
   */
  MrdInvalidArgument = 1,
  /**
   * The input data could not be read or is malformed.
   */
  MrdDataError = 2,
  /**
   * A numerical routine or estimator failed on this input.
   */
  MrdNumericalError = 3,
  /**
   * A required pointer was NULL.
   */
  MrdNullPointer = 4,
  /**
   * An internal invariant was violated; the library state is unchanged.
   */
  MrdPanic = 5,
} MrdStatus;

/**
 * Opaque 3-d volume handle.
 */
typedef struct MrdVolume MrdVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on the calling thread, or an empty
 * string. The pointer stays valid until the next failing call on the same
 * thread.
 *
 * # Safety
 * The returned pointer must not be freed or used after a later failing call
 * from this thread.
 */
const char *mrd_last_error(void);

/**
 * Build a volume from a dense voxel array laid out x-fastest
 * (`index = x + nx*(y + ny*z)`). `intensity_peak` is the nominal maximum
 * (e.g. 255); it scales the quality metrics and percentage-based noise
 * levels.
 *
 * # Safety
 * `data` must point to `nx*ny*nz` readable doubles; `out` must be a valid
 * pointer. The handle written to `*out` must be released with
 * `mrd_volume_free`.
 */
enum MrdStatus mrd_volume_from_data(const double *data,
                                    uintptr_t nx,
                                    uintptr_t ny,
                                    uintptr_t nz,
                                    double intensity_peak,
                                    struct MrdVolume **out);

/**
 * Load a volume from the native raw+sidecar format or a single-file
 * NIfTI-1 `.nii`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid. The handle
 * must be released with `mrd_volume_free`.
 */
enum MrdStatus mrd_volume_load(const char *path, struct MrdVolume **out);

/**
 * Store a volume in the native raw+sidecar format.
 *
 * # Safety
 * `vol` must be a live handle; `path` a NUL-terminated string.
 */
enum MrdStatus mrd_volume_store(const struct MrdVolume *vol, const char *path);

/**
 * Dimensions of a volume.
 *
 * # Safety
 * All pointers must be valid; `vol` must be a live handle.
 */
enum MrdStatus mrd_volume_dims(const struct MrdVolume *vol,
                               uintptr_t *nx,
                               uintptr_t *ny,
                               uintptr_t *nz);

/**
 * Copy the voxel data (x-fastest order) into a caller buffer of exactly
 * `len` doubles; `len` must equal nx*ny*nz.
 *
 * # Safety
 * `buffer` must point to `len` writable doubles; `vol` must be live.
 */
enum MrdStatus mrd_volume_data(const struct MrdVolume *vol, double *buffer, uintptr_t len);

/**
 * Release a volume handle. NULL is ignored.
 *
 * # Safety
 * `vol` must be a handle returned by this library and not freed before.
 */
void mrd_volume_free(struct MrdVolume *vol);

/**
 * Generate the built-in piecewise-smooth phantom. `t2_contrast` = 0 gives
 * the brighter default contrast, nonzero the inverted one.
 *
 * # Safety
 * `out` must be valid; release the handle with `mrd_volume_free`.
 */
enum MrdStatus mrd_phantom(uintptr_t nx,
                           uintptr_t ny,
                           uintptr_t nz,
                           int32_t t2_contrast,
                           uint64_t seed,
                           struct MrdVolume **out);

/**
 * Corrupt a volume with stationary Rician noise of level `sigma_g`.
 *
 * # Safety
 * `clean` must be live; `out` valid; release the handle with
 * `mrd_volume_free`.
 */
enum MrdStatus mrd_add_rician_noise(const struct MrdVolume *clean,
                                    double sigma_g,
                                    uint64_t seed,
                                    struct MrdVolume **out);

/**
 * Estimate the stationary noise level. `use_mad` = 0 selects the
 * Rayleigh-background median estimator, nonzero the wavelet MAD estimator.
 *
 * # Safety
 * `vol` must be live; `sigma_out` valid.
 */
enum MrdStatus mrd_estimate_noise(const struct MrdVolume *vol, int32_t use_mad, double *sigma_out);

/**
 * Run a denoising pipeline described by a token string (for example
 * `"dgpd"`: patch filter, bias correction, guided re-filter, post filter)
 * with a noise source of `"background"`, `"mad"`, `"nlpca"` or
 * `"exact:SIGMA"`. All stage parameters take their documented defaults.
 *
 * # Safety
 * `noisy` must be live; `tokens` and `noise_source` NUL-terminated strings;
 * `out` valid. Release the handle with `mrd_volume_free`.
 */
enum MrdStatus mrd_denoise(const struct MrdVolume *noisy,
                           const char *tokens,
                           const char *noise_source,
                           uint64_t seed,
                           struct MrdVolume **out);

/**
 * PSNR (dB), SSIM and RMSE of `test` against `truth` over the truth's
 * foreground region. PSNR is +infinity when the volumes agree exactly.
 *
 * # Safety
 * Both handles must be live; the three output pointers valid.
 */
enum MrdStatus mrd_quality(const struct MrdVolume *test,
                           const struct MrdVolume *truth,
                           double *psnr_out,
                           double *ssim_out,
                           double *rmse_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MRDENOISE_H */
