//! C ABI over `lpm-core`.
//!
//! Every function returns an [`LpmStatus`]. On failure the message is kept
//! per thread and read with [`lpm_last_error`]. Strings handed out by the
//! library are NUL-terminated UTF-8 and must be released with
//! [`lpm_string_free`]. Handles are opaque and released with their `_free`
//! function; passing a freed handle is undefined behaviour.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lpm_core::kvcache::{retained_set, RetentionPolicy};
use lpm_core::runtime::protocol::parse_client;
use lpm_core::runtime::{parse_script, run_session, ClientMsg, LiveSession, SessionConfig};
use lpm_core::LpmError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Protocol = 5,
    BufferTooSmall = 6,
    Numeric = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Live session: one backbone/refiner pair driven in real time.
pub struct LpmSession {
    inner: LiveSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("NULs replaced")));
}

struct Failure(LpmStatus, String);

impl From<LpmError> for Failure {
    fn from(e: LpmError) -> Self {
        let status = match &e {
            LpmError::Config(_) => LpmStatus::Config,
            LpmError::Protocol(_) | LpmError::Json(_) => LpmStatus::Protocol,
            LpmError::NonFinite(_) | LpmError::DegenerateRow { .. } | LpmError::Diverged { .. } => LpmStatus::Numeric,
            LpmError::Io(_) => LpmStatus::Io,
            LpmError::Shape(_) | LpmError::AudioUnderrun { .. } => LpmStatus::InvalidArgument,
            _ => LpmStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(LpmStatus::Protocol, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LpmStatus::Ok,
        Ok(Err(Failure(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LpmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LpmStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(LpmStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn read_opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        read_str(p, what).map(Some)
    }
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(LpmStatus::Internal, e.to_string()))?;
    // SAFETY: callers check `out` for null first.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn session_config(json: Option<&str>) -> Result<SessionConfig, Failure> {
    let cfg: SessionConfig = match json {
        Some(s) if !s.trim().is_empty() => serde_json::from_str(s)?,
        _ => SessionConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Last error message on this thread, or null. Owned by the library; valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lpm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` is null or came from this library and has not been freed.
#[no_mangle]
pub unsafe extern "C" fn lpm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Chunk indices kept in the attention window when generating `current`,
/// ascending. Writes at most `cap` indices to `out` and the full count to
/// `out_len`; returns `BUFFER_TOO_SMALL` if `cap` is short.
///
/// # Safety
/// `out` points to `cap` writable `size_t`s (may be null when `cap` is 0);
/// `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_retained_set(
    current: usize,
    sink_chunks: usize,
    recent_chunks: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> LpmStatus {
    guard(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        if out.is_null() && cap > 0 {
            return Err(null("out"));
        }
        let policy = RetentionPolicy {
            sink_chunks,
            recent_chunks,
        };
        policy.validate()?;
        let set = retained_set(current, &policy);
        *out_len = set.len();
        if set.len() > cap {
            return Err(Failure(
                LpmStatus::BufferTooSmall,
                format!("retained set has {} entries, buffer holds {cap}", set.len()),
            ));
        }
        ptr::copy_nonoverlapping(set.as_ptr(), out, set.len());
        Ok(())
    })
}

/// Runs a scripted session of `n_chunks` chunks and returns its NDJSON
/// trace. `config_json` and `script_ndjson` may be null for defaults and an
/// empty script.
///
/// # Safety
/// String arguments are null or valid NUL-terminated strings; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_run_session(
    config_json: *const c_char,
    script_ndjson: *const c_char,
    n_chunks: usize,
    out: *mut *mut c_char,
) -> LpmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = session_config(read_opt_str(config_json, "config_json")?)?;
        let events = match read_opt_str(script_ndjson, "script_ndjson")? {
            Some(s) => parse_script(s)?,
            None => Vec::new(),
        };
        let trace = run_session(&events, n_chunks, &cfg)?;
        let mut buf = Vec::new();
        trace.write_ndjson(&mut buf)?;
        give_string(String::from_utf8(buf).map_err(|e| Failure(LpmStatus::Internal, e.to_string()))?, out)
    })
}

/// Starts a live session. `max_chunks` of 0 means unbounded.
///
/// # Safety
/// `config_json` is null or a valid NUL-terminated string; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_new(
    config_json: *const c_char,
    max_chunks: usize,
    out: *mut *mut LpmSession,
) -> LpmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = session_config(read_opt_str(config_json, "config_json")?)?;
        let inner = LiveSession::new(cfg, (max_chunks > 0).then_some(max_chunks))?;
        *out = Box::into_raw(Box::new(LpmSession { inner }));
        Ok(())
    })
}

/// Feeds one client message (the JSON wire format, without `start`).
///
/// # Safety
/// `s` is a live handle; `msg_json` is a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_send(s: *mut LpmSession, msg_json: *const c_char) -> LpmStatus {
    guard(|| {
        let s = s.as_mut().ok_or_else(|| null("session"))?;
        let msg = parse_client(read_str(msg_json, "msg_json")?)?;
        if let ClientMsg::Start { .. } = msg {
            return Err(Failure(LpmStatus::Protocol, "session already started".into()));
        }
        if let Some(ev) = msg.to_event()? {
            s.inner.ingest(ev);
        }
        Ok(())
    })
}

/// Writes 1 to `out` when a step may run now (gate open or end requested).
///
/// # Safety
/// `s` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_ready(s: *const LpmSession, out: *mut i32) -> LpmStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = i32::from(s.inner.should_step());
        Ok(())
    })
}

/// Writes 1 to `out` once the session ended or spent its chunk budget.
///
/// # Safety
/// `s` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_finished(s: *const LpmSession, out: *mut i32) -> LpmStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = i32::from(s.inner.finished());
        Ok(())
    })
}

/// Runs one boundary and chunk, blocking for the configured stage
/// latencies. `out` receives the server messages as NDJSON.
///
/// # Safety
/// `s` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_step(s: *mut LpmSession, out: *mut *mut c_char) -> LpmStatus {
    guard(|| {
        let s = s.as_mut().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if s.inner.finished() {
            return Err(Failure(LpmStatus::Protocol, "session finished".into()));
        }
        let mut text = String::new();
        for m in s.inner.step()? {
            text.push_str(&serde_json::to_string(&m)?);
            text.push('\n');
        }
        give_string(text, out)
    })
}

/// Full trace so far as NDJSON.
///
/// # Safety
/// `s` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpm_session_trace(s: *const LpmSession, out: *mut *mut c_char) -> LpmStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut buf = Vec::new();
        s.inner.trace().write_ndjson(&mut buf)?;
        give_string(String::from_utf8(buf).map_err(|e| Failure(LpmStatus::Internal, e.to_string()))?, out)
    })
}

/// Releases a session. Null is a no-op.
///
/// # Safety
/// `s` is null or a live handle from [`lpm_session_new`].
#[no_mangle]
pub unsafe extern "C" fn lpm_session_free(s: *mut LpmSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
