//! C ABI over the `hred` crate.
//!
//! Models and sessions are opaque handles. Every fallible call returns an
//! [`HredStatus`]; on failure [`hred_last_error`] describes the problem for
//! the calling thread. Strings returned through `char **` out-parameters are
//! owned by the caller and must be released with [`hred_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;
use std::time::Duration;

use hred::corpus::{read_dataset, Tokenizer};
use hred::eval;
use hred::models::Checkpoint;
use hred::service::{Service, ServiceConfig, ServiceError, SettingsJson};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HredStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidArgument = 5,
    UnknownSession = 6,
    EmptyUtterance = 7,
    Internal = 8,
}

/// A loaded model, its vocabulary and tokenizer.
pub struct HredModel {
    service: Arc<Service>,
}

/// One conversation with a model. Keeps the model alive, so it may be freed
/// after the model handle.
pub struct HredSession {
    service: Arc<Service>,
    id: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(HredStatus, String);

impl From<ServiceError> for Fail {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::UnknownSession(_) => HredStatus::UnknownSession,
            ServiceError::EmptyUtterance => HredStatus::EmptyUtterance,
            ServiceError::Settings(_) | ServiceError::Eval(_) => HredStatus::InvalidArgument,
            ServiceError::NoVocabulary | ServiceError::Model(_) => HredStatus::Checkpoint,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HredStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HredStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HredStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(HredStatus::NullArgument, format!("{what} is null")));
    }
    // SAFETY: the caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(HredStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        unsafe { str_arg(p, what) }.map(Some)
    }
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(HredStatus::Internal, "string contains NUL".into()))?;
    // SAFETY: checked non-null by the caller of this helper.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(HredStatus::NullArgument, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

fn json_err(e: serde_json::Error) -> Fail {
    Fail(HredStatus::Internal, e.to_string())
}

/// Message describing the last failure on this thread, or NULL. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn hred_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hred_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Loads a checkpoint. `gazetteer_path` (one name per line) may be NULL.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hred_model_load(
    checkpoint_path: *const c_char,
    gazetteer_path: *const c_char,
    out: *mut *mut HredModel,
) -> HredStatus {
    guard(|| {
        check_out(out)?;
        let path = unsafe { str_arg(checkpoint_path, "checkpoint_path") }?;
        let gaz = unsafe { opt_str_arg(gazetteer_path, "gazetteer_path") }?;
        let ck = Checkpoint::load(Path::new(path)).map_err(|e| Fail(HredStatus::Checkpoint, e.to_string()))?;
        let tok = match gaz {
            Some(g) => {
                let f = File::open(g).map_err(|e| Fail(HredStatus::Io, format!("{g}: {e}")))?;
                Tokenizer::read_gazetteer(BufReader::new(f)).map_err(|e| Fail(HredStatus::Io, e.to_string()))?
            }
            None => Tokenizer::new(),
        };
        // Sessions are owned by the caller, so they never expire.
        let cfg = ServiceConfig {
            idle_timeout: Duration::MAX,
            ..Default::default()
        };
        let service = Service::from_checkpoint(ck, tok, cfg)?;
        let model = Box::new(HredModel {
            service: Arc::new(service),
        });
        unsafe { *out = Box::into_raw(model) };
        Ok(())
    })
}

/// Frees a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`hred_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hred_model_free(model: *mut HredModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// JSON object with variant, dimensions and vocabulary hash.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hred_model_info(model: *const HredModel, out_json: *mut *mut c_char) -> HredStatus {
    guard(|| {
        check_out(out_json)?;
        let m = unsafe { model.as_ref() }.ok_or(Fail(HredStatus::NullArgument, "model is null".into()))?;
        out_string(
            out_json,
            serde_json::to_string(&m.service.model_info()).map_err(json_err)?,
        )
    })
}

/// Evaluates the model on a triples file and returns the report as JSON
/// (`ppl`, `ppl_u3`, `wer`, `wer_u3`, `n`, `n_w`, `n_w_u3`).
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hred_model_evaluate(
    model: *const HredModel,
    data_path: *const c_char,
    out_json: *mut *mut c_char,
) -> HredStatus {
    guard(|| {
        check_out(out_json)?;
        let m = unsafe { model.as_ref() }.ok_or(Fail(HredStatus::NullArgument, "model is null".into()))?;
        let path = unsafe { str_arg(data_path, "data_path") }?;
        let f = File::open(path).map_err(|e| Fail(HredStatus::Io, format!("{path}: {e}")))?;
        let data = read_dataset(BufReader::new(f), m.service.vocab())
            .map_err(|e| Fail(HredStatus::InvalidArgument, e.to_string()))?;
        let report =
            eval::evaluate(m.service.model(), &data).map_err(|e| Fail(HredStatus::InvalidArgument, e.to_string()))?;
        out_string(out_json, serde_json::to_string(&report).map_err(json_err)?)
    })
}

/// Starts a conversation. `settings_json` may be NULL for defaults, or an
/// object with any of `mode` ("map" | "sample"), `width`, `temperature`,
/// `seed`, `max_len`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hred_session_new(
    model: *const HredModel,
    settings_json: *const c_char,
    out: *mut *mut HredSession,
) -> HredStatus {
    guard(|| {
        check_out(out)?;
        let m = unsafe { model.as_ref() }.ok_or(Fail(HredStatus::NullArgument, "model is null".into()))?;
        let settings: SettingsJson = match unsafe { opt_str_arg(settings_json, "settings_json") }? {
            Some(s) => serde_json::from_str(s).map_err(|e| Fail(HredStatus::InvalidArgument, e.to_string()))?,
            None => SettingsJson::default(),
        };
        let info = m.service.create_session(&settings)?;
        let s = Box::new(HredSession {
            service: Arc::clone(&m.service),
            id: info.session_id,
        });
        unsafe { *out = Box::into_raw(s) };
        Ok(())
    })
}

/// Ends a conversation. NULL is ignored.
///
/// # Safety
/// `session` must come from [`hred_session_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hred_session_free(session: *mut HredSession) {
    if !session.is_null() {
        let s = unsafe { Box::from_raw(session) };
        let _ = s.service.delete_session(&s.id);
    }
}

/// Sends one user utterance and returns the model's reply as JSON
/// (`response`, `tokens`, `log_prob`, `turn`, `finished`, `session_id`).
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hred_session_turn(
    session: *mut HredSession,
    utterance: *const c_char,
    out_json: *mut *mut c_char,
) -> HredStatus {
    guard(|| {
        check_out(out_json)?;
        let s = unsafe { session.as_ref() }.ok_or(Fail(HredStatus::NullArgument, "session is null".into()))?;
        let text = unsafe { str_arg(utterance, "utterance") }?;
        let r = s.service.chat_turn(&s.id, text, None)?;
        out_string(out_json, serde_json::to_string(&r).map_err(json_err)?)
    })
}
