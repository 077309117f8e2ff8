/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef STEPWISE_H
#define STEPWISE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 3 to 9 match the exit codes of the `stepwise`
// binary for the same error class.
enum SwStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SW_STATUS_OK = 0,
  SW_STATUS_NULL_POINTER = 1,
  SW_STATUS_INVALID_UTF8 = 2,
  SW_STATUS_CONFIG = 3,
  SW_STATUS_IO = 4,
  SW_STATUS_FORMAT = 5,
  SW_STATUS_EXHAUSTED = 6,
  SW_STATUS_INVALID_INPUT = 7,
  SW_STATUS_NUMERIC = 8,
  SW_STATUS_PROBE = 9,
  SW_STATUS_BUFFER_TOO_SMALL = 10,
  // The patching effect is undefined for these logits.
  SW_STATUS_DEGENERATE = 11,
  SW_STATUS_PANIC = 12,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SwStatus SwStatus;
#else
typedef int32_t SwStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// Patching-effect metric.
enum SwMetric
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SW_METRIC_A = 0,
  SW_METRIC_B = 1,
  SW_METRIC_C = 2,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SwMetric SwMetric;
#else
typedef int32_t SwMetric;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// Transformer weights in 32-bit floats.
typedef struct SwModel SwModel;

// A parsed problem.
typedef struct SwProblem SwProblem;

// Answer-position logits of one patching sample.
typedef struct SwRunLogits {
  // Clean run at the clean answer `r`.
  double cl_r;
  // Patched run at `r`.
  double pt_r;
  // Clean run at the corrupted answer `r'`.
  double cl_rp;
  double pt_rp;
  // Corrupted run at `r` and at `r'`.
  double star_r;
  double star_rp;
} SwRunLogits;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *sw_version(void);

// Message of this thread's most recent failure, or NULL. Valid until the
// next failing call on this thread.
const char *sw_last_error_message(void);

// Forget this thread's last error message.
void sw_clear_error(void);

// Size of the fixed vocabulary.
size_t sw_vocab_size(void);

// Token ids of `text`. `out_len` receives the token count even when the
// buffer is too small.
SwStatus sw_tokenize(const char *text, uint32_t *out, size_t cap, size_t *out_len);

// Parse a forward-order problem such as `a=4+6,b=a-2,b>>?`.
SwStatus sw_problem_parse(const char *text, struct SwProblem **out);

// Release a problem; NULL is ignored.
void sw_problem_free(struct SwProblem *p);

// Answer in `0..23`.
SwStatus sw_problem_answer(const struct SwProblem *p, uint8_t *out);

// Number of premises.
SwStatus sw_problem_n_steps(const struct SwProblem *p, size_t *out);

// Number of steps whose subtrahend is a variable.
SwStatus sw_problem_n_vas(const struct SwProblem *p, size_t *out);

// Prompt tokens (BOS through `?`), without the answer.
SwStatus sw_problem_prompt_tokens(const struct SwProblem *p,
                                  uint32_t *out,
                                  size_t cap,
                                  size_t *out_len);

// Freshly initialized model with `n_layers` blocks, `n_heads` heads and
// width `d_model`; other settings take their defaults.
SwStatus sw_model_init(size_t n_layers,
                       size_t n_heads,
                       size_t d_model,
                       uint64_t seed,
                       struct SwModel **out);

// Load a checkpoint directory.
SwStatus sw_model_load(const char *dir, struct SwModel **out);

// Write a checkpoint directory.
SwStatus sw_model_save(const struct SwModel *m, const char *dir);

// Release a model; NULL is ignored.
void sw_model_free(struct SwModel *m);

// Number of scalar parameters.
SwStatus sw_model_param_count(const struct SwModel *m, size_t *out);

// Logits over the vocabulary at the last position of `ids`. A `window`
// of 0 means plain causal attention.
SwStatus sw_model_next_logits(const struct SwModel *m,
                              const uint32_t *ids,
                              size_t n,
                              size_t window,
                              float *out,
                              size_t cap,
                              size_t *out_len);

// Greedy answer token for a problem.
SwStatus sw_model_predict(const struct SwModel *m,
                          const struct SwProblem *p,
                          size_t window,
                          uint32_t *out_token);

// Additive sliding-window mask, `seq_len * seq_len` row-major values of
// 0 or negative infinity.
SwStatus sw_sliding_window_mask(size_t seq_len,
                                size_t window,
                                float *out,
                                size_t cap,
                                size_t *out_len);

// Patching effect of one sample under `metric` (an [`SwMetric`] value);
// [`SwStatus::Degenerate`] when undefined.
SwStatus sw_patch_effect(const struct SwRunLogits *logits, int32_t metric, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEPWISE_H */
