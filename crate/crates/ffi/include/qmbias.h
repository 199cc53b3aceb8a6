#ifndef QMBIAS_H
#define QMBIAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  QM_STATUS_OK = 0,
  QM_STATUS_NULL_POINTER = 1,
  QM_STATUS_INVALID_UTF8 = 2,
  QM_STATUS_INVALID_ARGUMENT = 3,
  QM_STATUS_IO = 4,
  QM_STATUS_PARSE = 5,
  QM_STATUS_DEGENERATE = 6,
  /**
   * The run stopped with unresolved queries; rerun to resume.
   */
  QM_STATUS_INCOMPLETE = 7,
  QM_STATUS_INTERNAL = 8,
} QmStatus;

typedef enum {
  QM_SCALE_FOUR_POINT = 0,
  QM_SCALE_LIKERT7 = 1,
} QmScale;

/**
 * Loaded answer matrix.
 */
typedef struct QmCorpus QmCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *qmbias_last_error(void);

/**
 * Library version as a static string.
 */
const char *qmbias_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void qmbias_string_free(char *s);

/**
 * Binary answer for a raw scale value: 1 yes, 0 no, -1 missing (Likert neutral).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
QmStatus qmbias_binarize(QmScale scale, uint8_t value, int8_t *out);

/**
 * Label (1, 0 or -1) and normalized yes-probability (NaN when undefined).
 *
 * # Safety
 * `label` and `p_yes_norm` must be valid pointers.
 */
QmStatus qmbias_predict(double p_yes_raw, double p_no_raw, int8_t *label, double *p_yes_norm);

/**
 * Root mean square of `len` bias scores.
 *
 * # Safety
 * `biases` must point to `len` readable values; `out` must be valid.
 */
QmStatus qmbias_std_bias(const double *biases, size_t len, double *out);

/**
 * Pearson correlation of two series of length `len`.
 *
 * # Safety
 * `xs` and `ys` must each point to `len` readable values; `out` must be valid.
 */
QmStatus qmbias_pearson(const double *xs, const double *ys, size_t len, double *out);

/**
 * Loads a wide CSV and its question metadata with the default column mapping.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid. The handle is
 * released with `qmbias_corpus_free`.
 */
QmStatus qmbias_corpus_load(const char *matrix_path, const char *questions_path, QmCorpus **out);

/**
 * # Safety
 * `corpus` must come from `qmbias_corpus_load` and not have been freed.
 */
void qmbias_corpus_free(QmCorpus *corpus);

/**
 * # Safety
 * `corpus` and `out` must be valid pointers.
 */
QmStatus qmbias_corpus_respondents(const QmCorpus *corpus, size_t *out);

/**
 * Share of "yes" among respondents with a gold answer to `question_id`.
 *
 * # Safety
 * `corpus` and `out` must be valid; `question_id` NUL-terminated.
 */
QmStatus qmbias_corpus_yes_mean(const QmCorpus *corpus, const char *question_id, double *out);

/**
 * Accuracy of always answering the majority class.
 *
 * # Safety
 * `corpus` and `out` must be valid; `question_id` NUL-terminated.
 */
QmStatus qmbias_corpus_majority_baseline(const QmCorpus *corpus,
                                         const char *question_id,
                                         double *out);

/**
 * Zero-shot prompt for `target_text` in a raw chat template ("llama3" or "olmo").
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be valid. The result is
 * released with `qmbias_string_free`.
 */
QmStatus qmbias_render_zero_shot(const char *target_text, const char *template_id, char **out);

/**
 * Executes the run described by a TOML config in `run_dir` and writes the
 * reports. Returns `Incomplete` when queries remain unresolved.
 *
 * # Safety
 * Paths must be NUL-terminated; `resolved` may be NULL, otherwise it receives
 * the number of resolved results.
 */
QmStatus qmbias_run(const char *config_path, const char *run_dir, size_t *resolved);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QMBIAS_H */
