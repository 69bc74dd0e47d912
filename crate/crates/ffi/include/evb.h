#ifndef EVB_H
#define EVB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvbModelFormat {
  EVB_MODEL_FORMAT_BINARY = 0,
  EVB_MODEL_FORMAT_TEXT = 1,
  EVB_MODEL_FORMAT_AUTO = 2,
} EvbModelFormat;

typedef enum EvbOverlap {
  EVB_OVERLAP_LARGE = 0,
  EVB_OVERLAP_SMALL = 1,
  EVB_OVERLAP_NONE = 2,
} EvbOverlap;

typedef enum EvbStatus {
  EVB_STATUS_OK = 0,
  EVB_STATUS_NULL_POINTER = 1,
  EVB_STATUS_INVALID_ARGUMENT = 2,
  EVB_STATUS_IO = 3,
  EVB_STATUS_PARSE = 4,
  EVB_STATUS_EMPTY = 5,
  EVB_STATUS_INTERNAL = 6,
} EvbStatus;

// Opaque pose evaluation report.
typedef struct EvbPoseReport EvbPoseReport;

// Opaque sparse reconstruction.
typedef struct EvbScene EvbScene;

// Headline pose metrics for one bucket. Fields without a value are NaN.
typedef struct EvbPoseSummary {
  size_t n_pairs;
  double mre;
  double ra15;
  double ra30;
  double mte;
  double ta15;
  double ta30;
  double auc30;
} EvbPoseSummary;

typedef struct EvbDepthScores {
  double abs_rel;
  double delta1;
  double scale;
  size_t valid_pixels;
} EvbDepthScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *evb_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *evb_version(void);

// Loads a sparse model directory into `*out_scene`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out_scene` a valid pointer.
enum EvbStatus evb_scene_open(const char *dir,
                              enum EvbModelFormat format,
                              struct EvbScene **out_scene);

// # Safety
// `scene` must come from [`evb_scene_open`] and not be used afterwards.
void evb_scene_free(struct EvbScene *scene);

// Writes `[cameras, images, points]` counts into `counts`.
//
// # Safety
// `scene` must be a live handle and `counts` point to three `size_t`.
enum EvbStatus evb_scene_counts(const struct EvbScene *scene, size_t *counts);

// Writes the model to `dir` as binary or text.
//
// # Safety
// `scene` must be a live handle and `dir` a NUL-terminated string.
enum EvbStatus evb_scene_write(const struct EvbScene *scene,
                               const char *dir,
                               enum EvbModelFormat format);

// Geodesic angle in degrees between two row-major 3×3 rotations.
//
// # Safety
// `a` and `b` must point to nine doubles, `out_deg` to one.
enum EvbStatus evb_geodesic_deg(const double *a, const double *b, double *out_deg);

// Sign-invariant angle in degrees between two translation directions.
//
// # Safety
// `t` and `t_star` must point to three doubles, `out_deg` to one.
enum EvbStatus evb_translation_angle_deg(const double *t, const double *t_star, double *out_deg);

// Overlap category of a relative rotation given both cameras' `(fov_x, fov_y)` in degrees.
//
// # Safety
// `r_rel` must point to nine doubles, `fov_a` and `fov_b` to two each.
enum EvbStatus evb_classify_overlap(const double *r_rel,
                                    const double *fov_a,
                                    const double *fov_b,
                                    enum EvbOverlap *out_category);

// Evaluates a prediction file against curated pairs with default options.
//
// # Safety
// Paths must be NUL-terminated strings and `out_report` a valid pointer.
enum EvbStatus evb_pose_eval(const char *pairs_path,
                             const char *preds_path,
                             struct EvbPoseReport **out_report);

// Summary of bucket `all`, `large`, `small` or `none`. Returns
// `EVB_STATUS_EMPTY` when the bucket has no pairs.
//
// # Safety
// `report` must be a live handle, `bucket` a NUL-terminated string.
enum EvbStatus evb_pose_report_summary(const struct EvbPoseReport *report,
                                       const char *bucket,
                                       struct EvbPoseSummary *out_summary);

// Full report as JSON. Release the string with [`evb_string_free`].
//
// # Safety
// `report` must be a live handle and `out_json` a valid pointer.
enum EvbStatus evb_pose_report_json(const struct EvbPoseReport *report, char **out_json);

// # Safety
// `report` must come from [`evb_pose_eval`] and not be used afterwards.
void evb_pose_report_free(struct EvbPoseReport *report);

// # Safety
// `s` must come from this library and not be used afterwards.
void evb_string_free(char *s);

// Median-scaled AbsRel and δ₁ over `n` pixels.
//
// # Safety
// `pred` and `gt` must point to `n` doubles.
enum EvbStatus evb_depth_eval(const double *pred,
                              const double *gt,
                              size_t n,
                              struct EvbDepthScores *out_scores);

// Least-squares similarity taking `src` onto `dst` (`n` points, xyz
// interleaved). Writes scale, row-major rotation and translation.
//
// # Safety
// `src` and `dst` must point to `3n` doubles, `out_r` to nine, `out_t` to three.
enum EvbStatus evb_umeyama(const double *src,
                           const double *dst,
                           size_t n,
                           bool with_scale,
                           double *out_s,
                           double *out_r,
                           double *out_t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVB_H */
