#ifndef POSEFORGE_H
#define POSEFORGE_H

/* Generated by cbindgen from poseforge-ffi; regenerate with `cargo build -p poseforge-ffi`. Do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call in this interface.
typedef enum {
  PF_OK = 0,
  PF_NULL_ARGUMENT = 1,
  PF_INVALID_ARGUMENT = 2,
  PF_PARSE_FAILED = 3,
  PF_IO_FAILED = 4,
  PF_NUMERIC_FAILED = 5,
  PF_BUFFER_TOO_SMALL = 6,
  PF_PANIC = 7,
} PfStatus;

// Opaque trained-network handle.
typedef struct PfModel PfModel;

// Opaque keypoint-layout handle.
typedef struct PfSkeleton PfSkeleton;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message for the most recent failure on this thread into `buf`
// (NUL-terminated, truncated to `cap` bytes) and returns the full message
// length in bytes, excluding the terminator. Returns 0 when the last call
// succeeded. `buf` may be NULL when only the length is wanted.
size_t pf_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string; never freed.
const char *pf_version(void);

// Frees a string returned by this library. NULL is ignored.
void pf_string_free(char *s);

// Frees a byte blob returned by this library. NULL is ignored; `len` must
// be the length the library reported for it.
void pf_blob_free(uint8_t *ptr, size_t len);

// Returns the built-in 17-keypoint person layout. Never fails.
PfSkeleton *pf_skeleton_coco17(void);

// Parses a skeleton from its JSON description.
PfStatus pf_skeleton_from_json(const char *json, PfSkeleton **out);

// Number of keypoints in the layout; 0 for NULL.
size_t pf_skeleton_keypoint_count(const PfSkeleton *skel);

// Releases a skeleton handle. NULL is ignored.
void pf_skeleton_free(PfSkeleton *skel);

// Encodes `k` keypoints (x, y, v triples in input-crop pixels) into the
// serialized heatmap blob format. The caller frees the blob with
// `pf_blob_free`.
PfStatus pf_heatmap_encode(const PfSkeleton *skel,
                           const double *kpts,
                           const double *bbox,
                           size_t input_w,
                           size_t input_h,
                           double sigma,
                           bool supervise_occluded,
                           uint8_t **out_blob,
                           size_t *out_len);

// Decodes a heatmap blob to sub-pixel keypoints in input-crop pixels.
// Writes x, y, confidence triples (3 doubles per channel) into `out_kpts`,
// which holds `cap` doubles; `out_written` receives the number written.
PfStatus pf_heatmap_decode(const uint8_t *blob,
                           size_t blob_len,
                           double *out_kpts,
                           size_t cap,
                           size_t *out_written);

// Object keypoint similarity between a ground-truth instance and a
// prediction, both as x, y, v triples. Falloff constants come from the
// skeleton's per-keypoint values; `area` is the ground-truth object area.
PfStatus pf_oks(const PfSkeleton *skel,
                const double *gt_kpts,
                const double *gt_bbox,
                double area,
                const double *pred_kpts,
                double *out);

// Evaluates a results file against an annotation file (both in the JSON
// formats the toolkit reads and writes) and returns the report as a JSON
// string the caller frees with `pf_string_free`.
PfStatus pf_evaluate_files(const PfSkeleton *skel,
                           const char *gt_path,
                           const char *results_path,
                           char **out_report_json);

// Loads a checkpoint written by the trainer.
PfStatus pf_model_load(const char *path, PfModel **out);

// Number of keypoint channels the model predicts; 0 for NULL.
size_t pf_model_keypoint_count(const PfModel *model);

// Crop resolution the model expects, as width and height.
PfStatus pf_model_input_size(const PfModel *model, size_t *out_w, size_t *out_h);

// Releases a model handle. NULL is ignored.
void pf_model_free(PfModel *model);

// Predicts keypoints for one person box in an 8-bit RGB image
// (`img_w * img_h * 3` bytes, row-major, interleaved). Writes x, y,
// confidence triples in image coordinates into `out_kpts` (capacity `cap`
// doubles, needs `3 * k`) and the mean keypoint confidence into
// `out_score` when non-NULL.
PfStatus pf_model_predict(const PfModel *model,
                          const PfSkeleton *skel,
                          const uint8_t *pixels,
                          size_t img_w,
                          size_t img_h,
                          const double *bbox,
                          bool flip_test,
                          double *out_kpts,
                          size_t cap,
                          double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEFORGE_H */
