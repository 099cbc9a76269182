//! C ABI over the seqclr toolkit.
//!
//! Every fallible call returns a `seqclr_status` code; on failure the
//! message is kept per thread and read with `seqclr_last_error`.
//! Checkpoints are opaque handles owned by the caller and released with
//! `seqclr_checkpoint_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use seqclr::data::{Dataset, TextImage, INPUT_HEIGHT, INPUT_WIDTH};
use seqclr::decoders::ctc_loss;
use seqclr::seqclr::{contrastive_loss, Instance, InstanceSet, Side};
use seqclr::tensor::Tensor;
use seqclr::training::{predict, Checkpoint};
use seqclr::Error;

pub const SEQCLR_OK: c_int = 0;
pub const SEQCLR_ERR_NULL: c_int = 1;
pub const SEQCLR_ERR_ARGUMENT: c_int = 2;
pub const SEQCLR_ERR_IO: c_int = 3;
pub const SEQCLR_ERR_CONFIG: c_int = 4;
pub const SEQCLR_ERR_DATA: c_int = 5;
pub const SEQCLR_ERR_INCOMPATIBLE: c_int = 6;
pub const SEQCLR_ERR_DIVERGENCE: c_int = 7;
pub const SEQCLR_ERR_BUFFER_TOO_SMALL: c_int = 8;
pub const SEQCLR_ERR_PANIC: c_int = 9;

/// Opaque checkpoint handle.
pub struct SeqclrCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
    Ok(s) => s,
    Err(_) => panic!("version string"),
};

struct Fail(c_int, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Argument(_) | Error::Shape(_) | Error::Alignment(_) => SEQCLR_ERR_ARGUMENT,
            Error::Io(_) => SEQCLR_ERR_IO,
            Error::Config(_) => SEQCLR_ERR_CONFIG,
            Error::Incompatible(_) => SEQCLR_ERR_INCOMPATIBLE,
            Error::Divergence { .. } => SEQCLR_ERR_DIVERGENCE,
            _ => SEQCLR_ERR_DATA,
        };
        Fail(code, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SEQCLR_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            SEQCLR_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SEQCLR_ERR_NULL, format!("{what} is null"))
}

fn arg(msg: impl Into<String>) -> Fail {
    Fail(SEQCLR_ERR_ARGUMENT, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a>(h: *const SeqclrCheckpoint) -> Result<&'a Checkpoint, Fail> {
    h.as_ref().map(|h| &h.inner).ok_or_else(|| null("checkpoint"))
}

/// Copies `s` plus a NUL into `buf`; reports the needed size in `len` when given.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, len: *mut usize) -> Result<(), Fail> {
    if let Some(l) = len.as_mut() {
        *l = s.len();
    }
    if cap < s.len() + 1 {
        return Err(Fail(
            SEQCLR_ERR_BUFFER_TOO_SMALL,
            format!("buffer of {cap} bytes, {} needed", s.len() + 1),
        ));
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seqclr_version() -> *const c_char {
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn seqclr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Character-level Levenshtein distance of two UTF-8 strings.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn seqclr_edit_distance(a: *const c_char, b: *const c_char, out: *mut usize) -> c_int {
    guard(|| {
        let (a, b) = (str_arg(a, "a")?, str_arg(b, "b")?);
        *out_arg(out, "out")? = seqclr::metrics::edit_distance(a, b);
        Ok(())
    })
}

/// CTC negative log-likelihood of `target` under per-frame
/// log-probabilities `logp` (`frames × classes`, row-major). Writes
/// infinity when the target cannot be emitted in `frames` frames.
///
/// # Safety
/// `logp` must hold `frames * classes` doubles and `target` `target_len` ids.
#[no_mangle]
pub unsafe extern "C" fn seqclr_ctc_loss(
    logp: *const f64,
    frames: usize,
    classes: usize,
    target: *const usize,
    target_len: usize,
    blank: usize,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if frames == 0 || classes == 0 {
            return Err(arg("frames and classes must be positive"));
        }
        if blank >= classes {
            return Err(arg(format!("blank {blank} outside {classes} classes")));
        }
        let n = frames.checked_mul(classes).ok_or_else(|| arg("frames * classes overflows"))?;
        let lp = slice_arg(logp, n, "logp")?;
        let tgt = slice_arg(target, target_len, "target")?;
        if let Some(&bad) = tgt.iter().find(|&&c| c >= classes || c == blank) {
            return Err(arg(format!("target id {bad} is the blank or out of range")));
        }
        let t = Tensor::new(vec![frames, classes], lp.to_vec());
        *out_arg(out, "out")? = ctc_loss(&t, tgt, blank);
        Ok(())
    })
}

fn instance_set(data: &[f64], m: usize, d: usize, side: Side) -> InstanceSet {
    InstanceSet {
        instances: (0..m)
            .map(|i| Instance {
                vector: data[i * d..(i + 1) * d].to_vec(),
                image_index: i,
                instance_index: 0,
            })
            .collect(),
        side,
    }
}

/// Symmetric contrastive loss of two aligned instance sets, each `m × d`
/// row-major, summed over all `2m` anchors.
///
/// # Safety
/// `za` and `zb` must each hold `m * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn seqclr_contrastive_loss(
    za: *const f64,
    zb: *const f64,
    m: usize,
    d: usize,
    tau: f64,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if m == 0 || d == 0 {
            return Err(arg("m and d must be positive"));
        }
        let n = m.checked_mul(d).ok_or_else(|| arg("m * d overflows"))?;
        let a = instance_set(slice_arg(za, n, "za")?, m, d, Side::A);
        let b = instance_set(slice_arg(zb, n, "zb")?, m, d, Side::B);
        *out_arg(out, "out")? = contrastive_loss(&a, &b, tau)?;
        Ok(())
    })
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn seqclr_checkpoint_load(path: *const c_char, out: *mut *mut SeqclrCheckpoint) -> c_int {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SeqclrCheckpoint { inner: ck }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must come from `seqclr_checkpoint_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn seqclr_checkpoint_free(h: *mut SeqclrCheckpoint) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Training iterations completed when the checkpoint was written.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn seqclr_checkpoint_iteration(h: *const SeqclrCheckpoint, out: *mut u64) -> c_int {
    guard(|| {
        *out_arg(out, "out")? = handle(h)?.iteration as u64;
        Ok(())
    })
}

/// 1 when the checkpoint carries a trained decoder and charset, else 0.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn seqclr_checkpoint_has_decoder(h: *const SeqclrCheckpoint, out: *mut c_int) -> c_int {
    guard(|| {
        let ck = handle(h)?;
        *out_arg(out, "out")? = c_int::from(ck.decoder.is_some() && ck.charset.is_some());
        Ok(())
    })
}

/// Hex SHA-256 of the encoder weights (64 characters plus NUL).
///
/// # Safety
/// `h` must be a live handle; `buf` must hold `cap` bytes; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn seqclr_checkpoint_encoder_digest(
    h: *const SeqclrCheckpoint,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> c_int {
    guard(|| write_str(&handle(h)?.encoder_digest(), buf, cap, len))
}

/// Transcribes one grayscale image (`height × width` row-major, values in
/// [0, 1]) with the checkpoint's decoder. The UTF-8 result is written to
/// `buf`; `len` receives its byte length without the NUL.
///
/// # Safety
/// `h` must be a live handle, `pixels` must hold `height * width` doubles
/// and `buf` must hold `cap` bytes; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn seqclr_recognize(
    h: *const SeqclrCheckpoint,
    pixels: *const f64,
    height: usize,
    width: usize,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> c_int {
    guard(|| {
        let ck = handle(h)?;
        let (Some(dec), Some(charset)) = (&ck.decoder, &ck.charset) else {
            return Err(Fail(SEQCLR_ERR_INCOMPATIBLE, "checkpoint has no trained decoder".into()));
        };
        if height == 0 || width == 0 {
            return Err(arg("image must be non-empty"));
        }
        if ck.encoder.input_channels != 1 {
            return Err(Fail(SEQCLR_ERR_INCOMPATIBLE, "encoder expects color input".into()));
        }
        let n = height.checked_mul(width).ok_or_else(|| arg("height * width overflows"))?;
        let px = slice_arg(pixels, n, "pixels")?;
        if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(arg("pixel values must lie in [0, 1]"));
        }
        let img = TextImage::new(1, height, width, px.to_vec()).resize(INPUT_HEIGHT, INPUT_WIDTH);
        let data = Dataset::from_images(vec![img], None);
        let text = predict(&ck.params, &ck.encoder, dec, charset, &data)?.remove(0);
        write_str(&text, buf, cap, len)
    })
}
