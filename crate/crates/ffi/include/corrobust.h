#ifndef CORROBUST_H
#define CORROBUST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Values mirror the CLI's error classes.
 */
typedef enum CorrobustStatus {
  CORROBUST_STATUS_OK = 0,
  CORROBUST_STATUS_NULL_POINTER = 1,
  CORROBUST_STATUS_INVALID_ARGUMENT = 2,
  CORROBUST_STATUS_DATA_ERROR = 3,
  CORROBUST_STATUS_CHECKPOINT_ERROR = 4,
  CORROBUST_STATUS_NUMERIC_ERROR = 5,
  CORROBUST_STATUS_IO_ERROR = 6,
  CORROBUST_STATUS_PANIC = 7,
} CorrobustStatus;

/**
 * A labelled image set.
 */
typedef struct CorrobustDataset CorrobustDataset;

/**
 * A trained model.
 */
typedef struct CorrobustModel CorrobustModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *corrobust_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t corrobust_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CorrobustStatus corrobust_model_load(const char *path, struct CorrobustModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `corrobust_model_load` not yet freed.
 */
void corrobust_model_free(struct CorrobustModel *model);

/**
 * Writes `[channels, height, width]` and the class count.
 *
 * # Safety
 * `shape` must be valid for 3 writes and `classes` for one.
 */
enum CorrobustStatus corrobust_model_info(const struct CorrobustModel *model,
                                          size_t *shape,
                                          size_t *classes);

/**
 * Predicted class of each of `n` images laid out as `[n, C, H, W]`.
 *
 * # Safety
 * `images` must hold `n * C * H * W` floats and `labels_out` `n` slots.
 */
enum CorrobustStatus corrobust_model_predict(const struct CorrobustModel *model,
                                             const float *images,
                                             size_t n,
                                             uint32_t *labels_out);

/**
 * ℓ2 fast gradient attack of radius `eps`, box-clipped; writes the
 * perturbed images.
 *
 * # Safety
 * `images` and `images_out` must hold `n * C * H * W` floats, `labels` `n`.
 */
enum CorrobustStatus corrobust_fgm(const struct CorrobustModel *model,
                                   const float *images,
                                   const uint32_t *labels,
                                   size_t n,
                                   float eps,
                                   float *images_out);

/**
 * Procedural dataset with `classes` shape classes of `size` x `size` pixels.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CorrobustStatus corrobust_dataset_synthetic(size_t classes,
                                                 size_t size,
                                                 size_t samples_per_class,
                                                 uint64_t seed,
                                                 struct CorrobustDataset **out);

/**
 * Reads a CIFAR-10 binary batch file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CorrobustStatus corrobust_dataset_load_cifar10(const char *path,
                                                    struct CorrobustDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t corrobust_dataset_len(const struct CorrobustDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void corrobust_dataset_free(struct CorrobustDataset *dataset);

/**
 * Clean accuracy of `model` on `dataset`.
 *
 * # Safety
 * Handles must be live; `out` valid for one write.
 */
enum CorrobustStatus corrobust_accuracy(const struct CorrobustModel *model,
                                        const struct CorrobustDataset *dataset,
                                        double *out);

/**
 * Mean accuracy over all corruption kinds and severities.
 *
 * # Safety
 * Handles must be live; `out` valid for one write.
 */
enum CorrobustStatus corrobust_corruption_accuracy(const struct CorrobustModel *model,
                                                   const struct CorrobustDataset *dataset,
                                                   uint64_t seed,
                                                   double *out);

/**
 * Applies a named corruption (e.g. `"gaussian_noise"`) at severity 1..5 to
 * one `[C, H, W]` image.
 *
 * # Safety
 * `image` and `image_out` must hold `channels * height * width` floats.
 */
enum CorrobustStatus corrobust_corrupt_image(const char *kind,
                                             uint8_t severity,
                                             uint64_t seed,
                                             size_t channels,
                                             size_t height,
                                             size_t width,
                                             const float *image,
                                             float *image_out);

/**
 * Expected calibration error over `bins` equal-width confidence bins.
 * `correct[i]` is nonzero when prediction `i` was right.
 *
 * # Safety
 * `confidences` and `correct` must hold `n` values; `out` one write.
 */
enum CorrobustStatus corrobust_ece(const double *confidences,
                                   const uint8_t *correct,
                                   size_t n,
                                   size_t bins,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORROBUST_H */
