//! C ABI for `lowbit`.
//!
//! Every fallible function returns an [`LbStatus`]. On failure the message is
//! kept per thread and can be read with [`lb_last_error_message`]. Handles are
//! opaque, owned by the caller and released with the matching `*_free`.
//! Panics never cross the boundary; they are reported as
//! [`LbStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lowbit::kernels::{self, PackedWeight};
use lowbit::mx::container::{read_file, write_file, Container};
use lowbit::mx::e4m3;
use lowbit::nested::{make_master_with, MasterCode};
use lowbit::quant::{quantize_tensor_with, GroupLayout, QuantizedTensor, ScaleMode};
use lowbit::{Error, Tensor};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidState = 2,
    Parse = 3,
    Io = 4,
    Diverged = 5,
    NullPointer = 6,
    Panic = 7,
}

/// Dense `f64` tensor.
pub struct LbTensor(Tensor);

/// Group-quantized tensor.
pub struct LbQuantized(QuantizedTensor);

/// Nested master code.
pub struct LbMaster(MasterCode);

/// Scale storage requested when quantizing.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbScales {
    F64 = 0,
    E4M3 = 1,
}

impl From<LbScales> for ScaleMode {
    fn from(s: LbScales) -> Self {
        match s {
            LbScales::F64 => ScaleMode::Exact,
            LbScales::E4M3 => ScaleMode::E4M3,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LbStatus {
    match e {
        Error::InvalidArgument(_) => LbStatus::InvalidArgument,
        Error::InvalidState(_) => LbStatus::InvalidState,
        Error::Parse { .. } => LbStatus::Parse,
        Error::Diverged { .. } => LbStatus::Diverged,
        Error::Io(_) => LbStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LbStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            LbStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn layout(group_size: usize) -> Result<GroupLayout, Fail> {
    Ok(GroupLayout::new(group_size)?)
}

/// Message of the last failed call on this thread, or NULL after a
/// successful one. Valid until the next `lb_` call on the same thread.
#[no_mangle]
pub extern "C" fn lb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `len` values into a new tensor of the given shape.
///
/// # Safety
/// `shape` must point to `ndim` values and `values` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_new(
    shape: *const usize,
    ndim: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut LbTensor,
) -> LbStatus {
    guard(|| {
        let shape = slice(shape, ndim, "shape")?.to_vec();
        let values = slice(values, len, "values")?.to_vec();
        put(out, LbTensor(Tensor::new(shape, values)?))
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library, not already freed.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_free(t: *mut LbTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of elements, 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_len(t: *const LbTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Number of dimensions, 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_ndim(t: *const LbTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Borrowed shape array of `lb_tensor_ndim` entries, valid while `t` lives.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_shape(t: *const LbTensor) -> *const usize {
    t.as_ref().map_or(ptr::null(), |t| t.0.shape().as_ptr())
}

/// Borrowed row-major values of `lb_tensor_len` entries, valid while `t`
/// lives.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_values(t: *const LbTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.values().as_ptr())
}

/// Group-wise quantization at `bits` (2..=8).
///
/// # Safety
/// `t` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_quantize(
    t: *const LbTensor,
    bits: u8,
    group_size: usize,
    scales: LbScales,
    out: *mut *mut LbQuantized,
) -> LbStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let q = quantize_tensor_with(&t.0, layout(group_size)?, bits, scales.into())?;
        put(out, LbQuantized(q))
    })
}

/// # Safety
/// `q` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_quantized_free(q: *mut LbQuantized) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Code width, 0 for NULL.
///
/// # Safety
/// `q` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_quantized_bits(q: *const LbQuantized) -> u8 {
    q.as_ref().map_or(0, |q| q.0.bits())
}

/// # Safety
/// `q` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_dequantize(q: *const LbQuantized, out: *mut *mut LbTensor) -> LbStatus {
    guard(|| {
        let q = deref(q, "quantized")?;
        put(out, LbTensor(q.0.dequantize()))
    })
}

/// Master code at `master_bits`, serving every lower width.
///
/// # Safety
/// `t` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_master_new(
    t: *const LbTensor,
    master_bits: u8,
    group_size: usize,
    scales: LbScales,
    out: *mut *mut LbMaster,
) -> LbStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let m = make_master_with(&t.0, layout(group_size)?, master_bits, scales.into())?;
        put(out, LbMaster(m))
    })
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lb_master_free(m: *mut LbMaster) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Reconstruction at `bits`, which must not exceed the stored width.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_master_dequantize_at(
    m: *const LbMaster,
    bits: u8,
    out: *mut *mut LbTensor,
) -> LbStatus {
    guard(|| {
        let m = deref(m, "master")?;
        put(out, LbTensor(m.0.dequantize_at(bits)?))
    })
}

/// Copy that stores only the `bits`-bit codes.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_master_shift(
    m: *const LbMaster,
    bits: u8,
    out: *mut *mut LbMaster,
) -> LbStatus {
    guard(|| {
        let m = deref(m, "master")?;
        put(out, LbMaster(m.0.shifted(bits)?))
    })
}

fn wrong_kind(c: &Container, want: &str) -> Fail {
    Fail::Lib(Error::InvalidArgument(format!(
        "container holds a {} payload, expected {want}",
        c.kind().name()
    )))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_read(path_: *const c_char, out: *mut *mut LbTensor) -> LbStatus {
    guard(|| match read_file(path(path_)?)? {
        Container::Tensor(t) => put(out, LbTensor(t)),
        c => Err(wrong_kind(&c, "tensor")),
    })
}

/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lb_tensor_write(t: *const LbTensor, path_: *const c_char) -> LbStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        Ok(write_file(path(path_)?, &Container::Tensor(t.0.clone()))?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_quantized_read(
    path_: *const c_char,
    out: *mut *mut LbQuantized,
) -> LbStatus {
    guard(|| match read_file(path(path_)?)? {
        Container::Quantized(q) => put(out, LbQuantized(q)),
        c => Err(wrong_kind(&c, "quantized")),
    })
}

/// # Safety
/// `q` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lb_quantized_write(
    q: *const LbQuantized,
    path_: *const c_char,
) -> LbStatus {
    guard(|| {
        let q = deref(q, "quantized")?;
        Ok(write_file(
            path(path_)?,
            &Container::Quantized(q.0.clone()),
        )?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_master_read(path_: *const c_char, out: *mut *mut LbMaster) -> LbStatus {
    guard(|| match read_file(path(path_)?)? {
        Container::Master(m) => put(out, LbMaster(m)),
        c => Err(wrong_kind(&c, "master")),
    })
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lb_master_write(m: *const LbMaster, path_: *const c_char) -> LbStatus {
    guard(|| {
        let m = deref(m, "master")?;
        Ok(write_file(path(path_)?, &Container::Master(m.0.clone()))?)
    })
}

/// Round-to-nearest-even E4M3 byte, saturating at 448. NaN maps to 0x7F.
#[no_mangle]
pub extern "C" fn lb_e4m3_encode(v: f64) -> u8 {
    e4m3::encode(v)
}

#[no_mangle]
pub extern "C" fn lb_e4m3_decode(b: u8) -> f64 {
    e4m3::decode(b)
}

/// 2-bit quantization of a `K x N` weight for [`lb_gemv_w2a16`]. The
/// result is stored output-major (`N x K`) with groups along `K`.
///
/// # Safety
/// `w` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lb_quantize_for_gemv(
    w: *const LbTensor,
    group_size: usize,
    scales: LbScales,
    out: *mut *mut LbQuantized,
) -> LbStatus {
    guard(|| {
        let w = deref(w, "weight")?;
        let q = kernels::quantize_weight_for_gemv(&w.0, group_size, scales.into())?;
        put(out, LbQuantized(q))
    })
}

/// `y = x W` with a 2-bit weight from [`lb_quantize_for_gemv`] and `f64`
/// activations.
///
/// # Safety
/// `x` must point to `k` values and `y` to `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn lb_gemv_w2a16(
    w: *const LbQuantized,
    x: *const f64,
    k: usize,
    y: *mut f64,
    n: usize,
) -> LbStatus {
    guard(|| {
        let w = deref(w, "weight")?;
        let x = slice(x, k, "x")?;
        let pw = PackedWeight::from_quantized(&w.0)?;
        if pw.k != k || pw.n != n {
            return Err(Error::InvalidArgument(format!(
                "weight is {}x{}, got x of {k} and y of {n}",
                pw.k, pw.n
            ))
            .into());
        }
        let out = kernels::gemv_w2a16(x, &pw)?;
        if n > 0 {
            if y.is_null() {
                return Err(Fail::Null("y"));
            }
            std::slice::from_raw_parts_mut(y, n).copy_from_slice(out.values());
        }
        Ok(())
    })
}
