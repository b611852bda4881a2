#ifndef LOWBIT_H
#define LOWBIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum LbStatus {
  LB_STATUS_OK = 0,
  LB_STATUS_INVALID_ARGUMENT = 1,
  LB_STATUS_INVALID_STATE = 2,
  LB_STATUS_PARSE = 3,
  LB_STATUS_IO = 4,
  LB_STATUS_DIVERGED = 5,
  LB_STATUS_NULL_POINTER = 6,
  LB_STATUS_PANIC = 7,
} LbStatus;

/**
 * Scale storage requested when quantizing.
 */
typedef enum LbScales {
  LB_SCALES_F64 = 0,
  LB_SCALES_E4M3 = 1,
} LbScales;

/**
 * Nested master code.
 */
typedef struct LbMaster LbMaster;

/**
 * Group-quantized tensor.
 */
typedef struct LbQuantized LbQuantized;

/**
 * Dense `f64` tensor.
 */
typedef struct LbTensor LbTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful one. Valid until the next `lb_` call on the same thread.
 */
const char *lb_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lb_version(void);

/**
 * Copies `len` values into a new tensor of the given shape.
 *
 * # Safety
 * `shape` must point to `ndim` values and `values` to `len` values.
 */
enum LbStatus lb_tensor_new(const size_t *shape,
                            size_t ndim,
                            const double *values,
                            size_t len,
                            struct LbTensor **out);

/**
 * # Safety
 * `t` must be NULL or a handle from this library, not already freed.
 */
void lb_tensor_free(struct LbTensor *t);

/**
 * Number of elements, 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t lb_tensor_len(const struct LbTensor *t);

/**
 * Number of dimensions, 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t lb_tensor_ndim(const struct LbTensor *t);

/**
 * Borrowed shape array of `lb_tensor_ndim` entries, valid while `t` lives.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
const size_t *lb_tensor_shape(const struct LbTensor *t);

/**
 * Borrowed row-major values of `lb_tensor_len` entries, valid while `t`
 * lives.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
const double *lb_tensor_values(const struct LbTensor *t);

/**
 * Group-wise quantization at `bits` (2..=8).
 *
 * # Safety
 * `t` must be a live handle and `out` writable.
 */
enum LbStatus lb_quantize(const struct LbTensor *t,
                          uint8_t bits,
                          size_t group_size,
                          enum LbScales scales,
                          struct LbQuantized **out);

/**
 * # Safety
 * `q` must be NULL or a live handle.
 */
void lb_quantized_free(struct LbQuantized *q);

/**
 * Code width, 0 for NULL.
 *
 * # Safety
 * `q` must be NULL or a live handle.
 */
uint8_t lb_quantized_bits(const struct LbQuantized *q);

/**
 * # Safety
 * `q` must be a live handle and `out` writable.
 */
enum LbStatus lb_dequantize(const struct LbQuantized *q, struct LbTensor **out);

/**
 * Master code at `master_bits`, serving every lower width.
 *
 * # Safety
 * `t` must be a live handle and `out` writable.
 */
enum LbStatus lb_master_new(const struct LbTensor *t,
                            uint8_t master_bits,
                            size_t group_size,
                            enum LbScales scales,
                            struct LbMaster **out);

/**
 * # Safety
 * `m` must be NULL or a live handle.
 */
void lb_master_free(struct LbMaster *m);

/**
 * Reconstruction at `bits`, which must not exceed the stored width.
 *
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum LbStatus lb_master_dequantize_at(const struct LbMaster *m,
                                      uint8_t bits,
                                      struct LbTensor **out);

/**
 * Copy that stores only the `bits`-bit codes.
 *
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum LbStatus lb_master_shift(const struct LbMaster *m, uint8_t bits, struct LbMaster **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LbStatus lb_tensor_read(const char *path_, struct LbTensor **out);

/**
 * # Safety
 * `t` must be a live handle and `path` a NUL-terminated string.
 */
enum LbStatus lb_tensor_write(const struct LbTensor *t, const char *path_);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LbStatus lb_quantized_read(const char *path_, struct LbQuantized **out);

/**
 * # Safety
 * `q` must be a live handle and `path` a NUL-terminated string.
 */
enum LbStatus lb_quantized_write(const struct LbQuantized *q, const char *path_);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LbStatus lb_master_read(const char *path_, struct LbMaster **out);

/**
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum LbStatus lb_master_write(const struct LbMaster *m, const char *path_);

/**
 * Round-to-nearest-even E4M3 byte, saturating at 448. NaN maps to 0x7F.
 */
uint8_t lb_e4m3_encode(double v);

double lb_e4m3_decode(uint8_t b);

/**
 * 2-bit quantization of a `K x N` weight for [`lb_gemv_w2a16`]. The
 * result is stored output-major (`N x K`) with groups along `K`.
 *
 * # Safety
 * `w` must be a live handle and `out` writable.
 */
enum LbStatus lb_quantize_for_gemv(const struct LbTensor *w,
                                   size_t group_size,
                                   enum LbScales scales,
                                   struct LbQuantized **out);

/**
 * `y = x W` with a 2-bit weight from [`lb_quantize_for_gemv`] and `f64`
 * activations.
 *
 * # Safety
 * `x` must point to `k` values and `y` to `n` writable values.
 */
enum LbStatus lb_gemv_w2a16(const struct LbQuantized *w,
                            const double *x,
                            size_t k,
                            double *y,
                            size_t n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOWBIT_H */
