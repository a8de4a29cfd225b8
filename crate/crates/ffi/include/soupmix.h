#ifndef SOUPMIX_H
#define SOUPMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_INVALID_UTF8 = 2,
  SM_STATUS_IO = 3,
  SM_STATUS_CHECKPOINT = 4,
  SM_STATUS_SCHEMA = 5,
  SM_STATUS_PARTITION = 6,
  SM_STATUS_INVALID_ARGUMENT = 7,
  SM_STATUS_EVALUATION = 8,
  SM_STATUS_OPTIMIZER = 9,
  SM_STATUS_PANIC = 10,
} SmStatus;

/*
 Opaque named-tensor parameter set.
 */
typedef struct SmParams SmParams;

/*
 Opaque partition of tensor names into mixing components.
 */
typedef struct SmPartition SmPartition;

/*
 Options for [`sm_manifold_soup`]. Fill with [`sm_manifold_options_default`].
 */
typedef struct SmManifoldOptions {
  /*
   Gate tolerance in [0, 1].
   */
  double tau;
  /*
   Objective evaluations per optimizer call.
   */
  size_t budget;
  uint64_t seed;
  /*
   0 for COBYLA, 1 for Nelder-Mead.
   */
  int solver;
} SmManifoldOptions;

/*
 Accuracy callback for soup construction. Writes the accuracy in [0, 1]
 to `out_accuracy` and returns 0, or returns nonzero to abort the run.
 `params` is only valid for the duration of the call.
 */
typedef int (*SmEvaluateFn)(void *user_data, const struct SmParams *params, double *out_accuracy);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null if none. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *sm_last_error_message(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void sm_string_free(char *s);

/*
 Builds a single-tensor parameter set; further tensors are appended with
 [`sm_params_push`]. `shape` has `rank` entries and `data` holds their
 product in row-major order.

 # Safety
 Pointers must be valid for the given lengths.
 */
enum SmStatus sm_params_new(const char *name,
                            const size_t *shape,
                            size_t rank,
                            const float *data,
                            struct SmParams **out);

/*
 Appends a tensor to an existing set.

 # Safety
 `params` must be a live handle; other pointers as in [`sm_params_new`].
 */
enum SmStatus sm_params_push(struct SmParams *params,
                             const char *name,
                             const size_t *shape,
                             size_t rank,
                             const float *data);

/*
 Reads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum SmStatus sm_params_load(const char *path, struct SmParams **out);

/*
 Writes a checkpoint file with empty metadata.

 # Safety
 `params` must be a live handle and `path` NUL-terminated.
 */
enum SmStatus sm_params_save(const struct SmParams *params, const char *path);

/*
 Releases a parameter set. Null is ignored.

 # Safety
 `params` must come from this library and not have been freed.
 */
void sm_params_free(struct SmParams *params);

/*
 Number of tensors, or 0 for null.

 # Safety
 `params` must be null or a live handle.
 */
size_t sm_params_num_tensors(const struct SmParams *params);

/*
 Total scalar count, or 0 for null.

 # Safety
 `params` must be null or a live handle.
 */
size_t sm_params_num_params(const struct SmParams *params);

/*
 Name of tensor `index` as a new string.

 # Safety
 `params` must be a live handle and `out` writable.
 */
enum SmStatus sm_params_tensor_name(const struct SmParams *params, size_t index, char **out);

/*
 Borrows the data of the named tensor. The pointer stays valid while the
 handle lives and is not modified.

 # Safety
 `params` must be a live handle; `name` NUL-terminated; outputs writable.
 */
enum SmStatus sm_params_tensor_data(const struct SmParams *params,
                                    const char *name,
                                    const float **out_data,
                                    size_t *out_len);

/*
 `a·x + b·y` elementwise.

 # Safety
 `x`, `y` must be live handles and `out` writable.
 */
enum SmStatus sm_params_lincomb(double a,
                                const struct SmParams *x,
                                double b,
                                const struct SmParams *y,
                                struct SmParams **out);

/*
 Elementwise mean of `n` parameter sets.

 # Safety
 `pool` must point to `n` live handles and `out` be writable.
 */
enum SmStatus sm_params_mean(const struct SmParams *const *pool, size_t n, struct SmParams **out);

/*
 Parses a partition from its JSON text.

 # Safety
 `json` must be NUL-terminated and `out` writable.
 */
enum SmStatus sm_partition_from_json(const char *json, struct SmPartition **out);

/*
 Reads a partition JSON file.

 # Safety
 `path` must be NUL-terminated and `out` writable.
 */
enum SmStatus sm_partition_load(const char *path, struct SmPartition **out);

/*
 Derives an `m`-component partition from the schema of `params`.
 `strategy` is `"contiguous-blocks"` or `"by-name-prefix"`.

 # Safety
 `params` must be a live handle, `strategy` NUL-terminated, `out` writable.
 */
enum SmStatus sm_partition_auto(const struct SmParams *params,
                                size_t m,
                                const char *strategy,
                                struct SmPartition **out);

/*
 Number of components, or 0 for null.

 # Safety
 `spec` must be null or a live handle.
 */
size_t sm_partition_num_components(const struct SmPartition *spec);

/*
 Serializes a partition to a new JSON string.

 # Safety
 `spec` must be a live handle and `out` writable.
 */
enum SmStatus sm_partition_to_json(const struct SmPartition *spec, char **out);

/*
 Releases a partition. Null is ignored.

 # Safety
 `spec` must come from this library and not have been freed.
 */
void sm_partition_free(struct SmPartition *spec);

/*
 Component-wise convex combination `λ_j·psi + (1 − λ_j)·theta`.
 `lambda` has one entry per component, each in [0, 1].

 # Safety
 Handles must be live, `lambda` must hold `m` values, `out` writable.
 */
enum SmStatus sm_mix_components(const struct SmParams *psi,
                                const struct SmParams *theta,
                                const struct SmPartition *spec,
                                const double *lambda,
                                size_t m,
                                struct SmParams **out);

struct SmManifoldOptions sm_manifold_options_default(void);

/*
 Manifold mixing soup over `n` models. Accuracies come from `evaluate`,
 which is called with `user_data` on the calling thread. `ids` may be
 null, in which case models are named `model-<i>`. On success `out_params`
 receives the fused model and `out_report` (if non-null) the JSON trace.
 On failure after the run started, `out_report` receives the partial trace
 when one exists.

 # Safety
 `members` must hold `n` live handles, `ids` null or `n` strings, `spec`
 a live handle; output pointers writable.
 */
enum SmStatus sm_manifold_soup(const struct SmParams *const *members,
                               const char *const *ids,
                               size_t n,
                               const struct SmPartition *spec,
                               SmEvaluateFn evaluate,
                               void *user_data,
                               const struct SmManifoldOptions *options,
                               struct SmParams **out_params,
                               char **out_report);

/*
 Greedy soup over `n` models; same conventions as [`sm_manifold_soup`].

 # Safety
 As for [`sm_manifold_soup`].
 */
enum SmStatus sm_greedy_soup(const struct SmParams *const *members,
                             const char *const *ids,
                             size_t n,
                             SmEvaluateFn evaluate,
                             void *user_data,
                             struct SmParams **out_params,
                             char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOUPMIX_H */
