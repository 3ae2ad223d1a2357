#ifndef WL_H
#define WL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WlStatus {
  WL_STATUS_OK = 0,
  WL_STATUS_NULL_ARGUMENT = 1,
  WL_STATUS_INVALID_STRING = 2,
  WL_STATUS_BUFFER_TOO_SMALL = 3,
  WL_STATUS_SHAPE = 4,
  WL_STATUS_INDEX = 5,
  WL_STATUS_NUMERIC = 6,
  WL_STATUS_CONFIG = 7,
  WL_STATUS_INPUT = 8,
  WL_STATUS_STATE = 9,
  WL_STATUS_VOCAB = 10,
  WL_STATUS_FORMAT = 11,
  WL_STATUS_IO = 12,
  WL_STATUS_JSON = 13,
  WL_STATUS_PANIC = 14,
} WlStatus;

/**
 * Aggregated metrics over one or more videos.
 */
typedef struct WlReport WlReport;

/**
 * A stage-1 model with its vocabulary.
 */
typedef struct WlStage1 WlStage1;

/**
 * A trained stage-2 temporal model.
 */
typedef struct WlTemporal WlTemporal;

/**
 * Library version as a static NUL-terminated string.
 */
const char *wl_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the next failure.
 */
const char *wl_last_error_message(void);

/**
 * Free a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void wl_string_free(char *s);

/**
 * Frame accuracy (percent) of two label sequences of length `len`.
 *
 * # Safety
 * `pred` and `gt` must point to `len` readable values; `out` must be writable.
 */
enum WlStatus wl_frame_accuracy(const size_t *pred, const size_t *gt, size_t len, double *out);

/**
 * Segmental edit score (percent).
 *
 * # Safety
 * As for [`wl_frame_accuracy`].
 */
enum WlStatus wl_edit_score(const size_t *pred, const size_t *gt, size_t len, double *out);

/**
 * Segmental F1 (percent) at IoU threshold `tau`.
 *
 * # Safety
 * As for [`wl_frame_accuracy`].
 */
enum WlStatus wl_overlap_f1(const size_t *pred,
                            const size_t *gt,
                            size_t len,
                            double tau,
                            double *out);

/**
 * Score one video's label sequences.
 *
 * # Safety
 * `pred` and `gt` must point to `len` readable values; `out` must be writable.
 */
enum WlStatus wl_report_from_labels(const size_t *pred,
                                    const size_t *gt,
                                    size_t len,
                                    struct WlReport **out);

/**
 * Score predicted timeline JSON against ground-truth timeline JSON at `fps`.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum WlStatus wl_report_evaluate_files(const char *pred_path,
                                       const char *gt_path,
                                       double fps,
                                       struct WlReport **out);

/**
 * Video-level mean of a named metric (`accuracy`, `edit`, `f1@50`, ...).
 *
 * # Safety
 * `report` must be a live handle; `name` NUL-terminated; `out` writable.
 */
enum WlStatus wl_report_mean(const struct WlReport *report, const char *name, double *out);

/**
 * Frame accuracy pooled over all frames of all videos.
 *
 * # Safety
 * `report` must be a live handle; `out` writable.
 */
enum WlStatus wl_report_acc_micro(const struct WlReport *report, double *out);

/**
 * Full report as JSON; release with [`wl_string_free`].
 *
 * # Safety
 * `report` must be a live handle; `out` writable.
 */
enum WlStatus wl_report_to_json(const struct WlReport *report, char **out);

/**
 * # Safety
 * `report` must come from this library and not have been freed.
 */
void wl_report_free(struct WlReport *report);

/**
 * Load a stage-2 checkpoint written by `wl train-temporal`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum WlStatus wl_temporal_load(const char *path, struct WlTemporal **out);

/**
 * Input width and number of classes of a temporal model.
 *
 * # Safety
 * `model` must be a live handle; outputs writable.
 */
enum WlStatus wl_temporal_dims(const struct WlTemporal *model,
                               size_t *feature_dim,
                               size_t *num_classes);

/**
 * Final-stage labels of a row-major `[rows, dim]` feature matrix, written to `labels_out[rows]`.
 *
 * # Safety
 * `features` must hold `rows * dim` floats and `labels_out` room for `rows` values.
 */
enum WlStatus wl_temporal_predict(const struct WlTemporal *model,
                                  const float *features,
                                  size_t rows,
                                  size_t dim,
                                  size_t *labels_out);

/**
 * # Safety
 * `model` must come from this library and not have been freed.
 */
void wl_temporal_free(struct WlTemporal *model);

/**
 * Load a stage-1 bundle written by `wl pretrain` or `wl finetune-lora`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum WlStatus wl_stage1_load(const char *path, struct WlStage1 **out);

/**
 * Clip features of a `.wlfg` video sampled at `fps`, split into `clip_s`-second clips.
 *
 * Writes the clip count to `rows` and the width to `dim`. With a null `buf` only
 * the sizes are reported; otherwise `buf` needs `rows * dim` floats
 * (`capacity`), else [`WlStatus::BufferTooSmall`].
 *
 * # Safety
 * `stage1` must be a live handle; `video_path` NUL-terminated; `rows` and `dim`
 * writable; `buf`, when not null, must have room for `capacity` floats.
 */
enum WlStatus wl_stage1_extract_features(const struct WlStage1 *stage1,
                                         const char *video_path,
                                         double fps,
                                         double clip_s,
                                         float *buf,
                                         size_t capacity,
                                         size_t *rows,
                                         size_t *dim);

/**
 * # Safety
 * `stage1` must come from this library and not have been freed.
 */
void wl_stage1_free(struct WlStage1 *stage1);

/**
 * Number of videos in a feature directory written by `wl extract-features`.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` writable.
 */
enum WlStatus wl_feature_dir_count(const char *dir, size_t *out);

#endif  /* WL_H */
