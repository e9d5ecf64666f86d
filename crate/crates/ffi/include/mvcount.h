#ifndef MVCOUNT_H
#define MVCOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvcStatus {
  MVC_STATUS_OK = 0,
  MVC_STATUS_NULL_POINTER = 1,
  MVC_STATUS_INVALID_ARGUMENT = 2,
  MVC_STATUS_IO = 3,
  MVC_STATUS_FORMAT = 4,
  MVC_STATUS_NON_FINITE = 5,
  MVC_STATUS_BUFFER_TOO_SMALL = 6,
  MVC_STATUS_CHECK_FAILED = 7,
  MVC_STATUS_PANIC = 8,
} MvcStatus;

/**
 * A dataset loaded into memory.
 */
typedef struct MvcDataset MvcDataset;

/**
 * A trained or loaded model plus its rendered-density scale.
 */
typedef struct MvcModel MvcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *mvc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mvc_version(void);

/**
 * Generates a synthetic dataset under `out_dir`. `config_json` is a
 * synth config object or null for defaults.
 *
 * # Safety
 * String arguments must be null or valid NUL-terminated strings.
 */
enum MvcStatus mvc_generate_dataset(const char *config_json, uint64_t seed, const char *out_dir);

/**
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MvcStatus mvc_dataset_load(const char *dir, struct MvcDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from [`mvc_dataset_load`] that has not
 * been freed.
 */
void mvc_dataset_free(struct MvcDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum MvcStatus mvc_dataset_scene_count(const struct MvcDataset *dataset, size_t *out);

/**
 * Ground-truth person count of scene `index`.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum MvcStatus mvc_dataset_gt_count(const struct MvcDataset *dataset, size_t index, size_t *out);

/**
 * Trains on every scene of `dataset`. `config_json` is a training config
 * object or null for defaults.
 *
 * # Safety
 * `dataset` must be a live handle, `config_json` null or a valid string,
 * and `out` a valid pointer.
 */
enum MvcStatus mvc_train(const struct MvcDataset *dataset,
                         const char *config_json,
                         struct MvcModel **out);

/**
 * # Safety
 * `path` must be a valid string and `out` a valid pointer.
 */
enum MvcStatus mvc_model_load(const char *path, struct MvcModel **out);

/**
 * Writes the model as a manifest at `path` plus a float32 blob beside it.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid string.
 */
enum MvcStatus mvc_model_save(const struct MvcModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
void mvc_model_free(struct MvcModel *model);

/**
 * Number of scalar parameters in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MvcStatus mvc_model_parameter_count(const struct MvcModel *model, size_t *out);

/**
 * Predicted person count of scene `index`.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum MvcStatus mvc_predict_count(const struct MvcModel *model,
                                 const struct MvcDataset *dataset,
                                 size_t index,
                                 double *out);

/**
 * Scene-level MAE and NAE over every scene of `dataset`.
 *
 * # Safety
 * Handles must be live and the outputs valid pointers.
 */
enum MvcStatus mvc_evaluate(const struct MvcModel *model,
                            const struct MvcDataset *dataset,
                            double *mae,
                            double *nae);

/**
 * Renders view `view` of scene `index`. `rgb` receives `3·w·h` floats
 * (interleaved, row-major), `depth` and `density` `w·h` each; pass the
 * buffer length in floats as `*_len`. Any of the three may be null to skip
 * it. `width` and `height` are always written.
 *
 * # Safety
 * Handles must be live; non-null buffers must hold at least `*_len` floats.
 */
enum MvcStatus mvc_render_view(const struct MvcModel *model,
                               const struct MvcDataset *dataset,
                               size_t index,
                               size_t view,
                               size_t samples,
                               uint64_t seed,
                               float *rgb,
                               size_t rgb_len,
                               float *depth,
                               size_t depth_len,
                               float *density,
                               size_t density_len,
                               size_t *width,
                               size_t *height);

/**
 * Runs the gradient check. `config_json` is a gradcheck config or null.
 * Returns [`MvcStatus::CheckFailed`] when the tolerance is exceeded; the
 * outputs are written either way.
 *
 * # Safety
 * `config_json` must be null or a valid string; outputs valid pointers.
 */
enum MvcStatus mvc_gradcheck(const char *config_json,
                             uint64_t seed,
                             double *max_rel_err,
                             bool *pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVCOUNT_H */
