#ifndef ROTCONV_H
#define ROTCONV_H

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum RcStatus {
  RC_STATUS_OK = 0,
  RC_STATUS_NULL_POINTER = 1,
  RC_STATUS_SHAPE_MISMATCH = 2,
  RC_STATUS_OUT_OF_BOUNDS = 3,
  RC_STATUS_KERNEL_TOO_LARGE = 4,
  RC_STATUS_CHANNEL_MISMATCH = 5,
  RC_STATUS_INVALID_ARGUMENT = 6,
  RC_STATUS_UNSUPPORTED_KERNEL = 7,
  RC_STATUS_BUFFER_TOO_SMALL = 8,
  RC_STATUS_INTERNAL = 9,
} RcStatus;

/*
 Rotation group of the group convolutions.
 */
typedef enum RcGroup {
  /*
   Four quarter turns.
   */
  RC_GROUP_P4 = 4,
  /*
   Quarter turns and mirrored quarter turns.
   */
  RC_GROUP_P4M = 8,
} RcGroup;

/*
 `C_out×C_in×K_h×K_w` filters.
 */
typedef struct RcFilterBank RcFilterBank;

/*
 `C_out×R×H×W` orientation-indexed feature map.
 */
typedef struct RcOriented RcOriented;

/*
 `C×H×W` feature map.
 */
typedef struct RcTensor RcTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or an empty string. The
 pointer stays valid until the next call into this library on the thread.
 */
const char *rc_last_error(void);

/*
 Creates a tensor from `channels·height·width` row-major values, or zeros
 when `data` is null.

 # Safety
 `data` must be null or point to `channels·height·width` readable values;
 `out` must be writable.
 */
enum RcStatus rc_tensor_new(size_t channels,
                            size_t height,
                            size_t width,
                            const double *data,
                            struct RcTensor **out);

/*
 # Safety
 `t` must be null or a handle from this library that was not freed yet.
 */
void rc_tensor_free(struct RcTensor *t);

/*
 # Safety
 `t` must be a live handle; the shape pointers must be writable.
 */
enum RcStatus rc_tensor_shape(const struct RcTensor *t,
                              size_t *channels,
                              size_t *height,
                              size_t *width);

/*
 Copies the row-major values into `dst`, which must hold at least
 `channels·height·width` values.

 # Safety
 `t` must be a live handle; `dst` must point to `len` writable values.
 */
enum RcStatus rc_tensor_copy_data(const struct RcTensor *t, double *dst, size_t len);

/*
 Creates a filter bank from `out_channels·in_channels·kernel_h·kernel_w`
 values in `[c_out][c_in][i][j]` order, or zeros when `data` is null.

 # Safety
 As for [`rc_tensor_new`].
 */
enum RcStatus rc_filter_new(size_t out_channels,
                            size_t in_channels,
                            size_t kernel_h,
                            size_t kernel_w,
                            const double *data,
                            struct RcFilterBank **out);

/*
 # Safety
 `w` must be null or a live handle.
 */
void rc_filter_free(struct RcFilterBank *w);

/*
 # Safety
 `w` must be a live handle; `shape` must point to 4 writable values
 receiving `out_channels, in_channels, kernel_h, kernel_w`.
 */
enum RcStatus rc_filter_shape(const struct RcFilterBank *w, size_t *shape);

/*
 # Safety
 `w` must be a live handle; `dst` must point to `len` writable values.
 */
enum RcStatus rc_filter_copy_data(const struct RcFilterBank *w, double *dst, size_t len);

/*
 # Safety
 `f` must be null or a live handle.
 */
void rc_oriented_free(struct RcOriented *f);

/*
 # Safety
 `f` must be a live handle; `shape` must point to 4 writable values
 receiving `out_channels, orientations, height, width`.
 */
enum RcStatus rc_oriented_shape(const struct RcOriented *f, size_t *shape);

/*
 Copies values in `[c_out][r][h][w]` order.

 # Safety
 `f` must be a live handle; `dst` must point to `len` writable values.
 */
enum RcStatus rc_oriented_copy_data(const struct RcOriented *f, double *dst, size_t len);

/*
 Zero-padded, centred gather cross-correlation; output has the input's
 spatial size.

 # Safety
 `x`, `w` must be live handles; `out` must be writable.
 */
enum RcStatus rc_conv_gather_same(const struct RcTensor *x,
                                  const struct RcFilterBank *w,
                                  struct RcTensor **out);

/*
 Scatter convolution; equals [`rc_conv_gather_same`] with the same
 filters. `mults`, when not null, receives the multiplication count.

 # Safety
 `x`, `w` must be live handles; `out` must be writable; `mults` may be null.
 */
enum RcStatus rc_scatter_conv(const struct RcTensor *x,
                              const struct RcFilterBank *w,
                              struct RcTensor **out,
                              uint64_t *mults);

/*
 Tiled scatter convolution on `workers` threads. The result is
 bit-identical for every tile size and worker count.

 # Safety
 `x`, `w` must be live handles; `out` must be writable.
 */
enum RcStatus rc_tiled_scatter_conv(const struct RcTensor *x,
                                    const struct RcFilterBank *w,
                                    size_t tile_h,
                                    size_t tile_w,
                                    size_t workers,
                                    struct RcTensor **out);

/*
 Group convolution by gather, one pass per group element.

 # Safety
 `x`, `w` must be live handles; `out` must be writable.
 */
enum RcStatus rc_group_conv_gather(const struct RcTensor *x,
                                   const struct RcFilterBank *w,
                                   enum RcGroup group,
                                   struct RcOriented **out);

/*
 Group convolution by scatter with multiplication reuse. `mults`, when not
 null, receives the multiplication count, which does not depend on the
 group size.

 # Safety
 `x`, `w` must be live handles; `out` must be writable; `mults` may be null.
 */
enum RcStatus rc_group_conv_scatter_reuse(const struct RcTensor *x,
                                          const struct RcFilterBank *w,
                                          enum RcGroup group,
                                          struct RcOriented **out,
                                          uint64_t *mults);

/*
 Per-pixel mean over orientations.

 # Safety
 `f` must be a live handle; `out` must be writable.
 */
enum RcStatus rc_orientation_pool_avg(const struct RcOriented *f, struct RcTensor **out);

/*
 Per-pixel maximum over orientations.

 # Safety
 `f` must be a live handle; `out` must be writable.
 */
enum RcStatus rc_orientation_pool_max(const struct RcOriented *f, struct RcTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROTCONV_H */
