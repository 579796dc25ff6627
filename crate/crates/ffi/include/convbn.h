#ifndef CONVBN_H
#define CONVBN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum CbnStatus {
  CBN_STATUS_OK = 0,
  CBN_STATUS_NULL_POINTER = 1,
  CBN_STATUS_INVALID_ARGUMENT = 2,
  CBN_STATUS_SHAPE = 3,
  CBN_STATUS_DOMAIN = 4,
  CBN_STATUS_MODE = 5,
  CBN_STATUS_FORMAT = 6,
  CBN_STATUS_SCHEMA = 7,
  CBN_STATUS_UNSUPPORTED = 8,
  CBN_STATUS_IO = 9,
  CBN_STATUS_NON_FINITE = 10,
  /*
   A Rust panic was caught at the boundary.
   */
  CBN_STATUS_INTERNAL = 11,
} CbnStatus;

typedef enum CbnDtype {
  CBN_DTYPE_F32 = 0,
  CBN_DTYPE_F64 = 1,
} CbnDtype;

typedef enum CbnMode {
  CBN_MODE_TRAIN = 0,
  CBN_MODE_EVAL = 1,
  CBN_MODE_TUNE = 2,
  CBN_MODE_DEPLOY = 3,
} CbnMode;

/*
 One Conv+BN block.
 */
typedef struct CbnBlock CbnBlock;

/*
 Computation graph with its parameter store.
 */
typedef struct CbnGraph CbnGraph;

/*
 Tensors a block forward left for its backward.
 */
typedef struct CbnSaved CbnSaved;

/*
 Dense tensor.
 */
typedef struct CbnTensor CbnTensor;

/*
 Gradients of one block backward. Absent gradients are null and need no
 freeing.
 */
typedef struct CbnBlockGrads {
  struct CbnTensor *dx;
  struct CbnTensor *dweight;
  struct CbnTensor *dbias;
  struct CbnTensor *dgamma;
  struct CbnTensor *dbeta;
} CbnBlockGrads;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *cbn_version(void);

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call on the same thread.
 */
const char *cbn_last_error_message(void);

/*
 Creates a tensor from `numel` row-major values of the given shape. F32
 tensors round the values to single precision.

 # Safety
 `dims` must point to `rank` values and `data` to `numel` values.
 */
enum CbnStatus cbn_tensor_new(enum CbnDtype dtype,
                              const size_t *dims,
                              size_t rank,
                              const double *data,
                              size_t numel,
                              struct CbnTensor **out_tensor);

/*
 # Safety
 `t` must be null or a live tensor handle.
 */
void cbn_tensor_free(struct CbnTensor *t);

/*
 # Safety
 `t` must be a live tensor handle; `out_dtype` must be writable.
 */
enum CbnStatus cbn_tensor_dtype(const struct CbnTensor *t, enum CbnDtype *out_dtype);

/*
 Number of elements; 0 for a null handle.

 # Safety
 `t` must be null or a live tensor handle.
 */
size_t cbn_tensor_numel(const struct CbnTensor *t);

/*
 Rank; 0 for a null handle.

 # Safety
 `t` must be null or a live tensor handle.
 */
size_t cbn_tensor_rank(const struct CbnTensor *t);

/*
 Copies the extents into `dims`, which holds `cap` values.

 # Safety
 `t` must be a live tensor handle and `dims` writable for `cap` values.
 */
enum CbnStatus cbn_tensor_dims(const struct CbnTensor *t, size_t *dims, size_t cap);

/*
 Copies the values into `data`, which holds `cap` values.

 # Safety
 `t` must be a live tensor handle and `data` writable for `cap` values.
 */
enum CbnStatus cbn_tensor_read(const struct CbnTensor *t, double *data, size_t cap);

/*
 Builds an Eval-mode block. `bias` may be null. Geometry arrays are
 `{h, w}` pairs.

 # Safety
 Tensor arguments must be live handles (or null for `bias`); the arrays
 must hold two values each.
 */
enum CbnStatus cbn_block_new(const struct CbnTensor *weight,
                             const struct CbnTensor *bias,
                             const struct CbnTensor *gamma,
                             const struct CbnTensor *beta,
                             const struct CbnTensor *running_mean,
                             const struct CbnTensor *running_var,
                             const size_t *stride,
                             const size_t *padding,
                             double eps,
                             double momentum,
                             struct CbnBlock **out_block);

/*
 # Safety
 `b` must be null or a live block handle.
 */
void cbn_block_free(struct CbnBlock *b);

/*
 # Safety
 `b` must be a live block handle.
 */
enum CbnStatus cbn_block_set_mode(struct CbnBlock *b, enum CbnMode mode);

/*
 # Safety
 `b` must be a live block handle; `out_mode` must be writable.
 */
enum CbnStatus cbn_block_mode(const struct CbnBlock *b, enum CbnMode *out_mode);

/*
 Per-channel `gamma / sqrt(running_var + eps)`. Fails in Deploy mode.

 # Safety
 `b` must be a live block handle.
 */
enum CbnStatus cbn_block_scaling_coefficients(const struct CbnBlock *b,
                                              struct CbnTensor **out_tensor);

/*
 Forward pass in the block's mode. In Train mode the running statistics
 are updated when `update_running` is nonzero. `out_saved` may be null when
 no backward will follow.

 # Safety
 Handles must be live; `out_z` must be writable.
 */
enum CbnStatus cbn_block_forward(struct CbnBlock *b,
                                 const struct CbnTensor *x,
                                 int32_t update_running,
                                 struct CbnTensor **out_z,
                                 struct CbnSaved **out_saved);

/*
 # Safety
 `s` must be null or a live saved handle.
 */
void cbn_saved_free(struct CbnSaved *s);

/*
 Number of saved elements, the backward memory footprint.

 # Safety
 `s` must be null or a live saved handle.
 */
size_t cbn_saved_elements(const struct CbnSaved *s);

/*
 Backward pass for upstream gradient `dz`. Each non-null field of
 `out_grads` must later be released with [`cbn_tensor_free`].

 # Safety
 Handles must be live; `out_grads` must be writable.
 */
enum CbnStatus cbn_block_backward(const struct CbnBlock *b,
                                  const struct CbnSaved *saved,
                                  const struct CbnTensor *dz,
                                  struct CbnBlockGrads *out_grads);

/*
 Frees every tensor in `grads` and nulls the fields.

 # Safety
 `grads` must be null or filled by [`cbn_block_backward`].
 */
void cbn_block_grads_free(struct CbnBlockGrads *grads);

/*
 Loads a graph JSON. `params_path` may be null, in which case the file the
 JSON names is used.

 # Safety
 Strings must be NUL-terminated; `out_graph` must be writable.
 */
enum CbnStatus cbn_graph_load(const char *json_path,
                              const char *params_path,
                              struct CbnGraph **out_graph);

/*
 Writes the graph JSON and its parameters (`params_name`, relative to the
 JSON's directory).

 # Safety
 Handles and strings must be valid.
 */
enum CbnStatus cbn_graph_save(const struct CbnGraph *g,
                              const char *json_path,
                              const char *params_name);

/*
 # Safety
 `g` must be null or a live graph handle.
 */
void cbn_graph_free(struct CbnGraph *g);

/*
 Fuses every eligible Conv->BN pair into `mode` (Tune or Deploy) and
 reports how many were rewritten. `out_rewritten` may be null.

 # Safety
 `g` must be a live graph handle.
 */
enum CbnStatus cbn_graph_turn_on(struct CbnGraph *g, enum CbnMode mode, size_t *out_rewritten);

/*
 Undoes every rewrite. `out_reverted` may be null.

 # Safety
 `g` must be a live graph handle.
 */
enum CbnStatus cbn_graph_revert(struct CbnGraph *g, size_t *out_reverted);

/*
 Runs the graph. Unfused BN nodes use batch statistics when `train_bn` is
 nonzero and running statistics otherwise.

 # Safety
 Handles must be live; `out_y` must be writable.
 */
enum CbnStatus cbn_graph_forward(const struct CbnGraph *g,
                                 const struct CbnTensor *x,
                                 int32_t train_bn,
                                 struct CbnTensor **out_y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVBN_H */
