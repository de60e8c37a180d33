//! C ABI over checkpointed encoders: load a `.qkcp` file, inspect it, and
//! compute descriptors from any language that can call C.
//!
//! Conventions, uniform across the surface:
//!
//! - handles are opaque pointers created by `qki_encoder_load` and released
//!   by `qki_encoder_free`;
//! - every fallible call returns a [`QkiStatus`]; on failure the message is
//!   kept per thread and readable via `qki_last_error_message`;
//! - null pointers are reported, never dereferenced, and no call unwinds
//!   across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use qki::encoder::{encode_batch, load_encoder, BaselineFeaturizer, EncoderParams, EncoderRole};
use qki::loss::pair_score;
use qki::numeric::Matrix;
use qki::QkiError;

/// Bumped on any breaking change to this interface.
pub const QKI_ABI_VERSION: u32 = 1;

/// Result of every fallible call. Codes 2-4 mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkiStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration value (for example a non-positive temperature).
    Config = 2,
    /// Bad file, shape mismatch, or any other data problem.
    Data = 3,
    /// Non-finite arithmetic.
    Numeric = 4,
    /// A path or string argument was not valid UTF-8.
    Utf8 = 5,
    /// Unexpected internal failure; the library state is still sound.
    Internal = 6,
}

/// A loaded encoder checkpoint: the trained parameters plus the fixed
/// baseline featurizer they were saved with.
pub struct QkiEncoder {
    params: EncoderParams,
    featurizer: BaselineFeaturizer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn fail(e: QkiError) -> QkiStatus {
    let status = match e {
        QkiError::Config(_) => QkiStatus::Config,
        QkiError::Numeric(_) => QkiStatus::Numeric,
        _ => QkiStatus::Data,
    };
    set_error(&e.to_string());
    status
}

fn null_argument(what: &str) -> QkiStatus {
    set_error(&format!("{what} must not be null"));
    QkiStatus::NullArgument
}

fn guarded(f: impl FnOnce() -> QkiStatus) -> QkiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            QkiStatus::Internal
        }
    }
}

/// The interface revision this library was built with.
#[no_mangle]
pub extern "C" fn qki_abi_version() -> u32 {
    QKI_ABI_VERSION
}

/// The failure text of the most recent non-`QKI_STATUS_OK` call on this
/// thread. The pointer stays valid until the next failing call on the same
/// thread; the string is empty when nothing has failed yet.
#[no_mangle]
pub extern "C" fn qki_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load an encoder checkpoint (a `.qkcp` file written by training or by
/// `save_encoder`). On success `*out` owns the handle; release it with
/// `qki_encoder_free`.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_load(
    path: *const c_char,
    out: *mut *mut QkiEncoder,
) -> QkiStatus {
    guarded(|| {
        if path.is_null() {
            return null_argument("path");
        }
        if out.is_null() {
            return null_argument("out");
        }
        unsafe { *out = std::ptr::null_mut() };
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return QkiStatus::Utf8;
            }
        };
        match load_encoder(path) {
            Ok((params, featurizer)) => {
                let handle = Box::new(QkiEncoder { params, featurizer });
                unsafe { *out = Box::into_raw(handle) };
                QkiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a handle. Null is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_free(enc: *mut QkiEncoder) {
    if !enc.is_null() {
        drop(unsafe { Box::from_raw(enc) });
    }
}

/// Input dimension the encoder expects, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_input_dim(enc: *const QkiEncoder) -> usize {
    if enc.is_null() {
        0
    } else {
        unsafe { &*enc }.params.arch.d_in
    }
}

/// Descriptor dimension the encoder produces, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_descriptor_dim(enc: *const QkiEncoder) -> usize {
    if enc.is_null() {
        0
    } else {
        unsafe { &*enc }.params.arch.d_out
    }
}

/// 0 for a query encoder, 1 for a key encoder, -1 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_role(enc: *const QkiEncoder) -> i32 {
    if enc.is_null() {
        return -1;
    }
    match unsafe { &*enc }.params.role {
        EncoderRole::Query => 0,
        EncoderRole::Key => 1,
    }
}

fn describe_rows(
    enc: &QkiEncoder,
    inputs: &[f64],
    n_rows: usize,
    input_dim: usize,
    out: &mut [f64],
) -> QkiStatus {
    let d_out = enc.params.arch.d_out;
    if input_dim != enc.params.arch.d_in {
        return fail(QkiError::Shape(format!(
            "input dimension {input_dim} does not match the encoder's {}",
            enc.params.arch.d_in
        )));
    }
    if out.len() != n_rows * d_out {
        return fail(QkiError::Shape(format!(
            "output buffer holds {} values but {n_rows} x {d_out} are needed",
            out.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n_rows)
        .map(|r| inputs[r * input_dim..(r + 1) * input_dim].to_vec())
        .collect();
    let xs = match Matrix::from_rows(&rows) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    match encode_batch(&enc.params, &enc.featurizer, &xs) {
        Ok(desc) => {
            out.copy_from_slice(&desc.data);
            QkiStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Descriptor of a single input vector. `input_len` must equal
/// `qki_encoder_input_dim`, `out_len` must equal
/// `qki_encoder_descriptor_dim`.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_describe(
    enc: *const QkiEncoder,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> QkiStatus {
    guarded(|| {
        if enc.is_null() {
            return null_argument("enc");
        }
        if input.is_null() {
            return null_argument("input");
        }
        if out.is_null() {
            return null_argument("out");
        }
        let enc = unsafe { &*enc };
        let input = unsafe { std::slice::from_raw_parts(input, input_len) };
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        describe_rows(enc, input, 1, input_len, out)
    })
}

/// Descriptors of `n_rows` row-major input vectors of `input_dim` values
/// each. `out` must hold `n_rows * qki_encoder_descriptor_dim` values and is
/// written row-major. A zero-row batch succeeds and writes nothing.
#[no_mangle]
pub unsafe extern "C" fn qki_encoder_describe_batch(
    enc: *const QkiEncoder,
    inputs: *const f64,
    n_rows: usize,
    input_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> QkiStatus {
    guarded(|| {
        if enc.is_null() {
            return null_argument("enc");
        }
        if n_rows == 0 {
            return QkiStatus::Ok;
        }
        if inputs.is_null() {
            return null_argument("inputs");
        }
        if out.is_null() {
            return null_argument("out");
        }
        let enc = unsafe { &*enc };
        let total = match n_rows.checked_mul(input_dim) {
            Some(t) => t,
            None => {
                return fail(QkiError::Shape(format!(
                    "{n_rows} rows x {input_dim} values overflows"
                )))
            }
        };
        let inputs = unsafe { std::slice::from_raw_parts(inputs, total) };
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        describe_rows(enc, inputs, n_rows, input_dim, out)
    })
}

/// Match probability exp(-||a - b||^2 / tau) of two descriptors of length
/// `len`, written to `*out`.
#[no_mangle]
pub unsafe extern "C" fn qki_pair_score(
    a: *const f64,
    b: *const f64,
    len: usize,
    tau: f64,
    out: *mut f64,
) -> QkiStatus {
    guarded(|| {
        if a.is_null() {
            return null_argument("a");
        }
        if b.is_null() {
            return null_argument("b");
        }
        if out.is_null() {
            return null_argument("out");
        }
        let a = unsafe { std::slice::from_raw_parts(a, len) };
        let b = unsafe { std::slice::from_raw_parts(b, len) };
        match pair_score(a, b, tau) {
            Ok(p) => {
                unsafe { *out = p };
                QkiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
