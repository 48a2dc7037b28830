#ifndef REFER_H
#define REFER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ReferStatus {
  REFER_STATUS_OK = 0,
  REFER_STATUS_NULL_POINTER = 1,
  REFER_STATUS_INVALID_UTF8 = 2,
  REFER_STATUS_CONTRACT = 3,
  REFER_STATUS_DEGENERATE = 4,
  REFER_STATUS_NON_FINITE = 5,
  REFER_STATUS_CONFIG = 6,
  REFER_STATUS_PARSE = 7,
  REFER_STATUS_IO = 8,
  REFER_STATUS_SERIALIZATION = 9,
  REFER_STATUS_BUFFER_TOO_SMALL = 10,
  REFER_STATUS_PANIC = 11,
} ReferStatus;

/*
 Metric selector for [`refer_report_metric`].
 */
typedef enum ReferMetric {
  REFER_METRIC_SUFF_AOPC = 0,
  REFER_METRIC_COMP_AOPC = 1,
  REFER_METRIC_TF1 = 2,
  REFER_METRIC_AUPRC = 3,
  REFER_METRIC_IOU_F1 = 4,
  REFER_METRIC_ACCURACY = 5,
  REFER_METRIC_MACRO_F1 = 6,
} ReferMetric;

/*
 Trained or freshly initialized model parameters.
 */
typedef struct ReferModel ReferModel;

/*
 Evaluation report.
 */
typedef struct ReferReport ReferReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *refer_version(void);

/*
 Message of the last failed call on this thread, empty after a success.
 Writes at most `cap` bytes including the terminator and returns the size
 the full message needs; nothing is written when `cap` is too small.

 # Safety
 `buf` must be null or valid for `cap` bytes.
 */
size_t refer_last_error(char *buf, size_t cap);

/*
 Initializes a model from the `[model]` section of a TOML config (null for
 defaults) and a seed.

 # Safety
 `config_toml` must be null or a NUL-terminated string; `out` must be valid
 for writes.
 */
enum ReferStatus refer_model_init(const char *config_toml, uint64_t seed, struct ReferModel **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum ReferStatus refer_model_load(const char *path, struct ReferModel **out);

/*
 Writes a checkpoint file.

 # Safety
 `model` must come from this library; `path` must be NUL-terminated.
 */
enum ReferStatus refer_model_save(const struct ReferModel *model, const char *path);

/*
 # Safety
 `model` must be null or come from this library and not be used again.
 */
void refer_model_free(struct ReferModel *model);

/*
 Number of task classes, 0 for a null handle.

 # Safety
 `model` must be null or come from this library.
 */
size_t refer_model_num_classes(const struct ReferModel *model);

/*
 Extractor scores (logits), one per token, into `out[0..n]`.

 # Safety
 `tokens` and `out` must be valid for `n` elements.
 */
enum ReferStatus refer_model_scores(const struct ReferModel *model,
                                    const uint32_t *tokens,
                                    size_t n,
                                    double *out);

/*
 Class probabilities on the full input into `out[0..cap]`; `cap` must be
 at least the number of classes.

 # Safety
 `tokens` must be valid for `n` elements and `out` for `cap`.
 */
enum ReferStatus refer_model_predict(const struct ReferModel *model,
                                     const uint32_t *tokens,
                                     size_t n,
                                     double *out,
                                     size_t cap);

/*
 Top-`k_percent` selection of `scores` as 0/1 bytes into `out[0..n]`.

 # Safety
 `scores` and `out` must be valid for `n` elements.
 */
enum ReferStatus refer_topk_mask(const double *scores, size_t n, double k_percent, uint8_t *out);

/*
 Evaluates `model` on a JSONL dataset with the `[eval]` section of a TOML
 config (null for defaults).

 # Safety
 `dataset_path` must be NUL-terminated, `config_toml` null or
 NUL-terminated, and `out` valid for writes.
 */
enum ReferStatus refer_evaluate(const struct ReferModel *model,
                                const char *dataset_path,
                                const char *config_toml,
                                struct ReferReport **out);

/*
 One metric of a report into `*out`; metrics the report lacks (plausibility
 without gold) come back as NaN.

 # Safety
 `report` must come from this library; `out` must be valid for writes.
 */
enum ReferStatus refer_report_metric(const struct ReferReport *report,
                                     enum ReferMetric metric,
                                     double *out);

/*
 Report as JSON. `*needed` receives the size including the terminator;
 with a null `buf` or a short `cap` nothing is copied and the status is
 `BUFFER_TOO_SMALL`.

 # Safety
 `buf` must be null or valid for `cap` bytes; `needed` must be valid for
 writes.
 */
enum ReferStatus refer_report_json(const struct ReferReport *report,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

/*
 # Safety
 `report` must be null or come from this library and not be used again.
 */
void refer_report_free(struct ReferReport *report);

/*
 NRG scores of `n` systems against their own column ranges. `tf1` and
 `auprc` may be null, or hold NaN for systems without plausibility; those
 get NaN in `out_pnrg`.

 # Safety
 Every input array must be null (where allowed) or valid for `n` elements,
 and every output array valid for `n` elements.
 */
enum ReferStatus refer_nrg_compose(size_t n,
                                   const double *comp,
                                   const double *suff,
                                   const double *tf1,
                                   const double *auprc,
                                   const double *task,
                                   double *out_fnrg,
                                   double *out_pnrg,
                                   double *out_tnrg,
                                   double *out_cnrg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFER_H */
