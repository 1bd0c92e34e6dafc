#ifndef SYNTHBENCH_H
#define SYNTHBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SbModality {
  SB_MODALITY_CT = 0,
  SB_MODALITY_CBCT = 1,
  SB_MODALITY_MRI_T1W = 2,
  SB_MODALITY_MRI_T2W = 3,
  SB_MODALITY_MRI_T2F = 4,
  SB_MODALITY_PET = 5,
} SbModality;

typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_UTF8 = 2,
  SB_STATUS_IO = 3,
  SB_STATUS_FORMAT = 4,
  SB_STATUS_SHAPE = 5,
  SB_STATUS_PARAMETER = 6,
  SB_STATUS_VALIDATION = 7,
  SB_STATUS_OTHER = 8,
  SB_STATUS_PANIC = 9,
} SbStatus;

// Opaque volume handle.
typedef struct SbVolume SbVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *sb_last_error(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SbStatus sb_volume_read(const char *path, struct SbVolume **out);

// Builds a volume from `len` floats in x-fastest order.
//
// # Safety
// `dims` and `spacing` point to three values, `data` to `len` floats.
enum SbStatus sb_volume_from_data(const uintptr_t *dims,
                                  const double *spacing,
                                  enum SbModality modality,
                                  const float *data,
                                  uintptr_t len,
                                  struct SbVolume **out);

// # Safety
// `vol` is a live handle and `path` a NUL-terminated string.
enum SbStatus sb_volume_write(const struct SbVolume *vol, const char *path);

// # Safety
// `vol` is a live handle; `dims` has room for three values.
enum SbStatus sb_volume_dims(const struct SbVolume *vol, uintptr_t *dims);

// # Safety
// `vol` is a live handle; `out` is writable.
enum SbStatus sb_volume_modality(const struct SbVolume *vol, enum SbModality *out);

// Borrowed pointer to the voxel data; valid while the handle lives.
//
// # Safety
// `vol` is a live handle; `len` is writable or NULL.
const float *sb_volume_data(const struct SbVolume *vol, uintptr_t *len);

// # Safety
// `vol` came from this library and is not used afterwards. NULL is ignored.
void sb_volume_free(struct SbVolume *vol);

// PSNR in dB over the whole volume; +inf for identical inputs.
//
// # Safety
// Handles are live; `out` is writable.
enum SbStatus sb_psnr(const struct SbVolume *pred,
                      const struct SbVolume *reference,
                      double range,
                      double *out);

// # Safety
// Handles are live; `out` is writable.
enum SbStatus sb_ssim3d(const struct SbVolume *pred,
                        const struct SbVolume *reference,
                        double range,
                        double *out);

// # Safety
// Handles are live; `out` is writable.
enum SbStatus sb_nmse(const struct SbVolume *pred, const struct SbVolume *reference, double *out);

// One-tailed signed-rank p-value for positive differences.
//
// # Safety
// `diffs` points to `n` doubles; `out` is writable.
enum SbStatus sb_wilcoxon_one_tailed(const double *diffs, uintptr_t n, double *out);

// Multiplier from Bq/mL to SUV.
//
// # Safety
// `out` is writable.
enum SbStatus sb_suv_factor(double weight_kg, double dose_mbq, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNTHBENCH_H */
