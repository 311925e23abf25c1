//! C ABI over the `rotconv` convolution kernels.
//!
//! Tensors cross the boundary as opaque handles holding 64-bit data. Every
//! fallible function returns an [`RcStatus`]; on failure a description is
//! available from [`rc_last_error`] on the same thread. Handles returned
//! through out-pointers are owned by the caller and released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rotconv::group::{self, GroupSpec};
use rotconv::reference;
use rotconv::scatter::{self, HaloMode, MultCounter, TileConfig};
use rotconv::tensor::{FilterBank, OrientedFeature, Tensor3};
use rotconv::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStatus {
    Ok = 0,
    NullPointer = 1,
    ShapeMismatch = 2,
    OutOfBounds = 3,
    KernelTooLarge = 4,
    ChannelMismatch = 5,
    InvalidArgument = 6,
    UnsupportedKernel = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Rotation group of the group convolutions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcGroup {
    /// Four quarter turns.
    P4 = 4,
    /// Quarter turns and mirrored quarter turns.
    P4m = 8,
}

impl RcGroup {
    fn spec(self) -> GroupSpec {
        match self {
            RcGroup::P4 => GroupSpec::p4(),
            RcGroup::P4m => GroupSpec::p4m(),
        }
    }
}

/// `C×H×W` feature map.
pub struct RcTensor(Tensor3<f64>);

/// `C_out×C_in×K_h×K_w` filters.
pub struct RcFilterBank(FilterBank<f64>);

/// `C_out×R×H×W` orientation-indexed feature map.
pub struct RcOriented(OrientedFeature<f64>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RcStatus {
    match e {
        Error::ShapeMismatch(_) => RcStatus::ShapeMismatch,
        Error::OutOfBounds(..) => RcStatus::OutOfBounds,
        Error::KernelTooLarge { .. } => RcStatus::KernelTooLarge,
        Error::ChannelMismatch { .. } => RcStatus::ChannelMismatch,
        Error::UnsupportedKernel(..) => RcStatus::UnsupportedKernel,
        Error::InvalidArgument(_) => RcStatus::InvalidArgument,
        _ => RcStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (RcStatus, String)>) -> RcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RcStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RcStatus::Internal
        }
    }
}

fn lib<T>(r: rotconv::Result<T>) -> Result<T, (RcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (RcStatus, String) {
    (RcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (RcStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn read_input(data: *const f64, len: usize) -> Vec<f64> {
    if data.is_null() {
        vec![0.0; len]
    } else {
        std::slice::from_raw_parts(data, len).to_vec()
    }
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), (RcStatus, String)> {
    if dst.is_null() {
        return Err(null("destination buffer"));
    }
    if len < src.len() {
        return Err((
            RcStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn rc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a tensor from `channels·height·width` row-major values, or zeros
/// when `data` is null.
///
/// # Safety
/// `data` must be null or point to `channels·height·width` readable values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_tensor_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f64,
    out: *mut *mut RcTensor,
) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or((RcStatus::InvalidArgument, "tensor too large".to_string()))?;
        let t = lib(Tensor3::new(channels, height, width, read_input(data, len)))?;
        store(out, RcTensor(t));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn rc_tensor_free(t: *mut RcTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle; the shape pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_tensor_shape(
    t: *const RcTensor,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> RcStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        (*channels, *height, *width) = t.0.shape();
        Ok(())
    })
}

/// Copies the row-major values into `dst`, which must hold at least
/// `channels·height·width` values.
///
/// # Safety
/// `t` must be a live handle; `dst` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rc_tensor_copy_data(
    t: *const RcTensor,
    dst: *mut f64,
    len: usize,
) -> RcStatus {
    guard(|| copy_out(deref(t, "tensor")?.0.data(), dst, len))
}

/// Creates a filter bank from `out_channels·in_channels·kernel_h·kernel_w`
/// values in `[c_out][c_in][i][j]` order, or zeros when `data` is null.
///
/// # Safety
/// As for [`rc_tensor_new`].
#[no_mangle]
pub unsafe extern "C" fn rc_filter_new(
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    data: *const f64,
    out: *mut *mut RcFilterBank,
) -> RcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = [in_channels, kernel_h, kernel_w]
            .iter()
            .try_fold(out_channels, |a, &b| a.checked_mul(b))
            .ok_or((
                RcStatus::InvalidArgument,
                "filter bank too large".to_string(),
            ))?;
        let w = lib(FilterBank::new(
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            read_input(data, len),
        ))?;
        store(out, RcFilterBank(w));
        Ok(())
    })
}

/// # Safety
/// `w` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_filter_free(w: *mut RcFilterBank) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// # Safety
/// `w` must be a live handle; `shape` must point to 4 writable values
/// receiving `out_channels, in_channels, kernel_h, kernel_w`.
#[no_mangle]
pub unsafe extern "C" fn rc_filter_shape(w: *const RcFilterBank, shape: *mut usize) -> RcStatus {
    guard(|| {
        let w = deref(w, "filter bank")?;
        if shape.is_null() {
            return Err(null("shape output"));
        }
        let (a, b, c, d) = w.0.shape();
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(&[a, b, c, d]);
        Ok(())
    })
}

/// # Safety
/// `w` must be a live handle; `dst` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rc_filter_copy_data(
    w: *const RcFilterBank,
    dst: *mut f64,
    len: usize,
) -> RcStatus {
    guard(|| copy_out(deref(w, "filter bank")?.0.data(), dst, len))
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_oriented_free(f: *mut RcOriented) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// `f` must be a live handle; `shape` must point to 4 writable values
/// receiving `out_channels, orientations, height, width`.
#[no_mangle]
pub unsafe extern "C" fn rc_oriented_shape(f: *const RcOriented, shape: *mut usize) -> RcStatus {
    guard(|| {
        let f = deref(f, "oriented feature")?;
        if shape.is_null() {
            return Err(null("shape output"));
        }
        let (a, b, c, d) = f.0.shape();
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(&[a, b, c, d]);
        Ok(())
    })
}

/// Copies values in `[c_out][r][h][w]` order.
///
/// # Safety
/// `f` must be a live handle; `dst` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rc_oriented_copy_data(
    f: *const RcOriented,
    dst: *mut f64,
    len: usize,
) -> RcStatus {
    guard(|| copy_out(deref(f, "oriented feature")?.0.data(), dst, len))
}

/// Zero-padded, centred gather cross-correlation; output has the input's
/// spatial size.
///
/// # Safety
/// `x`, `w` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_conv_gather_same(
    x: *const RcTensor,
    w: *const RcFilterBank,
    out: *mut *mut RcTensor,
) -> RcStatus {
    guard(|| {
        let (x, w) = (deref(x, "input")?, deref(w, "filter bank")?);
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, RcTensor(lib(reference::conv_gather_same(&x.0, &w.0))?));
        Ok(())
    })
}

/// Scatter convolution; equals [`rc_conv_gather_same`] with the same
/// filters. `mults`, when not null, receives the multiplication count.
///
/// # Safety
/// `x`, `w` must be live handles; `out` must be writable; `mults` may be null.
#[no_mangle]
pub unsafe extern "C" fn rc_scatter_conv(
    x: *const RcTensor,
    w: *const RcFilterBank,
    out: *mut *mut RcTensor,
    mults: *mut u64,
) -> RcStatus {
    guard(|| {
        let (x, w) = (deref(x, "input")?, deref(w, "filter bank")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let mut counter = MultCounter::new();
        let y = lib(scatter::scatter_conv_multi(&x.0, &w.0, &mut counter))?;
        if !mults.is_null() {
            *mults = counter.mults();
        }
        store(out, RcTensor(y));
        Ok(())
    })
}

/// Tiled scatter convolution on `workers` threads. The result is
/// bit-identical for every tile size and worker count.
///
/// # Safety
/// `x`, `w` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_tiled_scatter_conv(
    x: *const RcTensor,
    w: *const RcFilterBank,
    tile_h: usize,
    tile_w: usize,
    workers: usize,
    out: *mut *mut RcTensor,
) -> RcStatus {
    guard(|| {
        let (x, w) = (deref(x, "input")?, deref(w, "filter bank")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = TileConfig::for_kernel(
            tile_h,
            tile_w,
            w.0.kernel_h(),
            w.0.kernel_w(),
            HaloMode::Plain,
        );
        store(
            out,
            RcTensor(lib(scatter::tiled_scatter_conv(&x.0, &w.0, &cfg, workers))?),
        );
        Ok(())
    })
}

/// Group convolution by gather, one pass per group element.
///
/// # Safety
/// `x`, `w` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_group_conv_gather(
    x: *const RcTensor,
    w: *const RcFilterBank,
    group: RcGroup,
    out: *mut *mut RcOriented,
) -> RcStatus {
    guard(|| {
        let (x, w) = (deref(x, "input")?, deref(w, "filter bank")?);
        if out.is_null() {
            return Err(null("out"));
        }
        store(
            out,
            RcOriented(lib(group::group_conv_gather(&x.0, &w.0, group.spec()))?),
        );
        Ok(())
    })
}

/// Group convolution by scatter with multiplication reuse. `mults`, when not
/// null, receives the multiplication count, which does not depend on the
/// group size.
///
/// # Safety
/// `x`, `w` must be live handles; `out` must be writable; `mults` may be null.
#[no_mangle]
pub unsafe extern "C" fn rc_group_conv_scatter_reuse(
    x: *const RcTensor,
    w: *const RcFilterBank,
    group: RcGroup,
    out: *mut *mut RcOriented,
    mults: *mut u64,
) -> RcStatus {
    guard(|| {
        let (x, w) = (deref(x, "input")?, deref(w, "filter bank")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let mut counter = MultCounter::new();
        let y = lib(group::group_conv_scatter_reuse(
            &x.0,
            &w.0,
            group.spec(),
            &mut counter,
        ))?;
        if !mults.is_null() {
            *mults = counter.mults();
        }
        store(out, RcOriented(y));
        Ok(())
    })
}

/// Per-pixel mean over orientations.
///
/// # Safety
/// `f` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_orientation_pool_avg(
    f: *const RcOriented,
    out: *mut *mut RcTensor,
) -> RcStatus {
    guard(|| {
        let f = deref(f, "oriented feature")?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, RcTensor(group::orientation_pool_avg(&f.0)));
        Ok(())
    })
}

/// Per-pixel maximum over orientations.
///
/// # Safety
/// `f` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_orientation_pool_max(
    f: *const RcOriented,
    out: *mut *mut RcTensor,
) -> RcStatus {
    guard(|| {
        let f = deref(f, "oriented feature")?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, RcTensor(group::orientation_pool_max(&f.0).0));
        Ok(())
    })
}
