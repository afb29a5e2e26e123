//! C ABI for loading TransNet checkpoints, running inference, pruning,
//! compiling transformations into kernels and scoring kernel invariance.
//!
//! Every function returns a [`TnetStatus`]. On failure a description is
//! available from [`tnet_last_error`] on the same thread until the next call.
//! Models are opaque [`TnetModel`] handles released with [`tnet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use transnet::invariance::{self, Metric};
use transnet::model::compile_transformation;
use transnet::training::{self, Predictor};
use transnet::{checkpoint, DihedralElement, Error, Tensor, TransNetModel, TransformationSet};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct TnetModel {
    inner: TransNetModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TnetStatus {
    match e {
        Error::Shape(_) => TnetStatus::Shape,
        Error::Format(_) | Error::Json(_) => TnetStatus::Format,
        Error::Io(_) => TnetStatus::Io,
        Error::Input(_) | Error::Config(_) | Error::Diverged(_) => TnetStatus::InvalidArgument,
    }
}

struct Fail(TnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TnetStatus::NullPointer, format!("{} is null", what))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TnetStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TnetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {}", msg));
            TnetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{} is not UTF-8", what)))
}

unsafe fn model_arg<'a>(m: *const TnetModel) -> Result<&'a TransNetModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_handle(m: TransNetModel) -> *mut TnetModel {
    Box::into_raw(Box::new(TnetModel { inner: m }))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn tnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a binary or JSON checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_load(path: *const c_char, out: *mut *mut TnetModel) -> TnetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = into_handle(checkpoint::load(Path::new(path))?);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_free(model: *mut TnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model as a binary checkpoint, or JSON when `json` is true.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_save(model: *const TnetModel, path: *const c_char, json: bool) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = Path::new(str_arg(path, "path")?);
        if json {
            checkpoint::save_json(m, path)?;
        } else {
            checkpoint::save(m, path)?;
        }
        Ok(())
    })
}

/// Number of heads, classes, input channels and parameters. Any output
/// pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_info(
    model: *const TnetModel,
    num_heads: *mut usize,
    num_classes: *mut usize,
    in_channels: *mut usize,
    num_parameters: *mut usize,
) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = m.params();
        for (ptr, v) in [
            (num_heads, p.num_heads()),
            (num_classes, p.num_classes()),
            (in_channels, p.in_channels()),
            (num_parameters, p.count_parameters()),
        ] {
            if let Some(o) = ptr.as_mut() {
                *o = v;
            }
        }
        Ok(())
    })
}

/// Name of head `head`'s transformation (such as `r1` or `mr2`) written as a
/// NUL-terminated string into `buf` of `len` bytes.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_head_transform(
    model: *const TnetModel,
    head: usize,
    buf: *mut c_char,
    len: usize,
) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let name = m.transform(head)?.name();
        if name.len() + 1 > len {
            return Err(invalid(format!("buffer of {} bytes too small", len)));
        }
        ptr::copy_nonoverlapping(name.as_ptr().cast::<c_char>(), buf, name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

unsafe fn predict_into(
    model: *const TnetModel,
    input: *const f64,
    channels: usize,
    size: usize,
    predictor: Predictor,
    out: *mut f64,
    out_len: usize,
) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let k = m.params().num_classes();
        if out_len < k {
            return Err(invalid(format!("output holds {} values, {} classes", out_len, k)));
        }
        let n = channels
            .checked_mul(size)
            .and_then(|v| v.checked_mul(size))
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid("empty or oversized input"))?;
        let x = Tensor::new(vec![channels, size, size], std::slice::from_raw_parts(input, n).to_vec())?;
        let logits = training::predict(m, &x, predictor)?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Logits of head `head` on its transformation of the `channels×size×size`
/// row-major input. Writes `num_classes` values to `out`.
///
/// # Safety
/// `input` must hold `channels·size·size` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_forward_head(
    model: *const TnetModel,
    head: usize,
    input: *const f64,
    channels: usize,
    size: usize,
    out: *mut f64,
    out_len: usize,
) -> TnetStatus {
    predict_into(model, input, channels, size, Predictor::Head(head), out, out_len)
}

/// Heads combined as configured in the checkpoint (mean logits by default).
///
/// # Safety
/// As [`tnet_model_forward_head`].
#[no_mangle]
pub unsafe extern "C" fn tnet_model_forward_full(
    model: *const TnetModel,
    input: *const f64,
    channels: usize,
    size: usize,
    out: *mut f64,
    out_len: usize,
) -> TnetStatus {
    predict_into(model, input, channels, size, Predictor::Full, out, out_len)
}

/// Mean of the full model on the input and on its horizontal flip.
///
/// # Safety
/// As [`tnet_model_forward_head`].
#[no_mangle]
pub unsafe extern "C" fn tnet_model_predict_flip_averaged(
    model: *const TnetModel,
    input: *const f64,
    channels: usize,
    size: usize,
    out: *mut f64,
    out_len: usize,
) -> TnetStatus {
    predict_into(model, input, channels, size, Predictor::FlipAveraged, out, out_len)
}

/// New single-head model keeping head `keep`. With `compile` its
/// transformation is folded into the kernels.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_prune(
    model: *const TnetModel,
    keep: usize,
    compile: bool,
    out: *mut *mut TnetModel,
) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out, "out")?;
        *out = into_handle(m.prune(keep, compile)?);
        Ok(())
    })
}

/// New model whose output on `x` equals the original's on `t(x)` for the
/// named dihedral element `t`; the head transformations are unchanged.
///
/// # Safety
/// `model` must be a live handle, `element` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tnet_model_compile_transformation(
    model: *const TnetModel,
    element: *const c_char,
    out: *mut *mut TnetModel,
) -> TnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out, "out")?;
        let t: DihedralElement = str_arg(element, "element")?.parse()?;
        let params = compile_transformation(m.params(), t);
        let mut compiled = TransNetModel::new(params, m.transforms().clone())?;
        compiled.combine = m.combine;
        *out = into_handle(compiled);
        Ok(())
    })
}

/// Score of one `channels×k×k` kernel under group `"c4"` or `"d4"` with
/// metric `"norm"`, `"pearson"` or `"cosine"`. `*defined` is false when the
/// metric is undefined for the kernel, and `*score` is then NaN.
///
/// # Safety
/// `kernel` must hold `channels·k·k` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tnet_invariance_score(
    kernel: *const f64,
    channels: usize,
    k: usize,
    group: *const c_char,
    metric: *const c_char,
    normalized: bool,
    score: *mut f64,
    defined: *mut bool,
) -> TnetStatus {
    guard(|| {
        if kernel.is_null() {
            return Err(null("kernel"));
        }
        let score = out_arg(score, "score")?;
        let group = TransformationSet::named_group(str_arg(group, "group")?)?;
        let metric: Metric = str_arg(metric, "metric")?.parse()?;
        let n = channels
            .checked_mul(k)
            .and_then(|v| v.checked_mul(k))
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid("empty or oversized kernel"))?;
        let w = Tensor::new(vec![channels, k, k], std::slice::from_raw_parts(kernel, n).to_vec())?;
        let s = invariance::similarity_score(&w, &group, metric, normalized)?;
        *score = s.unwrap_or(f64::NAN);
        if let Some(d) = defined.as_mut() {
            *d = s.is_some();
        }
        Ok(())
    })
}
