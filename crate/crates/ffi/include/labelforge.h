#ifndef LABELFORGE_H
#define LABELFORGE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LfStatus {
  LF_STATUS_OK = 0,
  LF_STATUS_NULL_POINTER = 1,
  LF_STATUS_INVALID_UTF8 = 2,
  LF_STATUS_INVALID_ARGUMENT = 3,
  LF_STATUS_PARSE = 4,
  LF_STATUS_UNKNOWN_CLASS = 5,
  LF_STATUS_PANIC = 6,
} LfStatus;

/**
 * Opaque class catalog.
 */
typedef struct LfCatalog LfCatalog;

/**
 * Opaque accumulator of detections and ground truth.
 */
typedef struct LfEvaluator LfEvaluator;

/**
 * Axis-aligned box in pixel corners.
 */
typedef struct LfBox {
  double x1;
  double y1;
  double x2;
  double y2;
} LfBox;

typedef struct LfVerdict {
  bool precision;
  bool recall;
  bool fit;
} LfVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on this thread.
 */
const char *lf_last_error_message(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void lf_string_free(char *s);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * Pointers must be valid for reads (`a`, `b`) and writes (`out`).
 */
enum LfStatus lf_iou(const struct LfBox *a, const struct LfBox *b, double *out);

/**
 * Class-agnostic NMS. Writes kept indices in ascending order to `keep`
 * (capacity `n`) and their count to `kept`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` elements; `keep` must have room for `n`.
 */
enum LfStatus lf_nms(const struct LfBox *boxes,
                     const double *scores,
                     size_t n,
                     double iou_threshold,
                     size_t *keep,
                     size_t *kept);

/**
 * Parses a label reviewer's answer.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum LfStatus lf_parse_verdict(const char *text, struct LfVerdict *out);

/**
 * Parses a catalog from JSON.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LfStatus lf_catalog_from_json(const char *json, struct LfCatalog **out);

/**
 * # Safety
 * `catalog` must come from [`lf_catalog_from_json`] and not have been freed.
 */
void lf_catalog_free(struct LfCatalog *catalog);

/**
 * # Safety
 * `catalog` must be a live handle; `out` must be writable.
 */
enum LfStatus lf_catalog_class_count(const struct LfCatalog *catalog, size_t *out);

/**
 * Detection prompts for one class as a JSON array of prompt strings.
 *
 * # Safety
 * `catalog` must be a live handle, `class_name` NUL-terminated, `out`
 * writable. Free the result with [`lf_string_free`].
 */
enum LfStatus lf_catalog_prompts(const struct LfCatalog *catalog,
                                 const char *class_name,
                                 char **out);

struct LfEvaluator *lf_evaluator_new(void);

/**
 * # Safety
 * `ev` must come from [`lf_evaluator_new`] and not have been freed.
 */
void lf_evaluator_free(struct LfEvaluator *ev);

/**
 * # Safety
 * `ev` must be a live handle; strings NUL-terminated.
 */
enum LfStatus lf_evaluator_add_ground_truth(struct LfEvaluator *ev,
                                            const char *image_id,
                                            const char *class_name,
                                            struct LfBox bbox);

/**
 * # Safety
 * `ev` must be a live handle; strings NUL-terminated.
 */
enum LfStatus lf_evaluator_add_detection(struct LfEvaluator *ev,
                                         const char *image_id,
                                         const char *class_name,
                                         struct LfBox bbox,
                                         double score);

/**
 * Mean AP at IoU 0.5 and averaged over 0.50:0.05:0.95.
 *
 * # Safety
 * `ev` must be a live handle; outputs writable.
 */
enum LfStatus lf_evaluator_ap(const struct LfEvaluator *ev, double *ap50, double *ap50_95);

/**
 * Full per-class report as JSON.
 *
 * # Safety
 * `ev` must be a live handle; `out` writable. Free with [`lf_string_free`].
 */
enum LfStatus lf_evaluator_report_json(const struct LfEvaluator *ev, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LABELFORGE_H */
