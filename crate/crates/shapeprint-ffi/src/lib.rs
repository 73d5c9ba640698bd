//! C ABI over the shaping and fingerprinting pipelines.
//!
//! Conventions, mirrored in the generated `include/shapeprint.h`:
//!
//! * Every fallible call returns [`sp_status`]; `SP_OK` is zero.
//! * Output parameters are written only when the call returns `SP_OK`; they
//!   must never be NULL.
//! * On failure the call records a thread-local message readable through
//!   [`sp_last_error_message`].
//! * Handles returned through `out` parameters are owned by the caller and
//!   must be released with the matching `*_free` function exactly once.
//! * Strings are NUL-terminated UTF-8. Callers pass a buffer plus its
//!   capacity; a too-small buffer fails with `SP_ERR_BUFFER_TOO_SMALL`
//!   without partial writes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapeprint::aggregate::{estimate_count, learn_count_thresholds};
use shapeprint::fingerprint::{
    assign_unique_sizes, classify_dominant, learn_profile, DeviceProfile,
};
use shapeprint::io;
use shapeprint::metrics::{chi_squared_independence, cosine_distance_dense, jsd};
use shapeprint::model::{size_histogram, Trace};
use shapeprint::obfuscation::{ilp_shape, stp_shape, StpParams};
use shapeprint::synth::{default_corpus, synth_device};
use shapeprint::Error;

/// Result code for every fallible entry point. `SP_OK` is zero so calls can
/// be checked with `if (sp_...(...)) { ... }`.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum sp_status {
    /// Success.
    SP_OK = 0,
    /// A required pointer argument was NULL.
    SP_ERR_NULL_ARGUMENT = 1,
    /// A string argument was not valid UTF-8.
    SP_ERR_INVALID_UTF8 = 2,
    /// An argument was outside its documented domain.
    SP_ERR_INVALID_ARGUMENT = 3,
    /// A caller-supplied buffer was too small for the result.
    SP_ERR_BUFFER_TOO_SMALL = 4,
    /// A file could not be read, written, or parsed.
    SP_ERR_IO = 5,
    /// The input carried too little data for the operation.
    SP_ERR_EMPTY_INPUT = 6,
    /// The independence test degenerated to a single row or column.
    SP_ERR_UNTESTABLE = 7,
    /// Real traffic exceeded what the shaping rate can carry.
    SP_ERR_OVERLOAD = 8,
    /// A packet size fell outside the tiered padding table.
    SP_ERR_UNSUPPORTED_SIZE = 9,
    /// A panic was caught at the boundary; state may be stale but the
    /// process is intact.
    SP_ERR_PANIC = 10,
    /// Any other library error; see `sp_last_error_message`.
    SP_ERR_OTHER = 11,
}

/// Opaque packet trace.
#[allow(non_camel_case_types)]
pub struct sp_trace(Trace);

/// Opaque set of learnt device profiles.
#[allow(non_camel_case_types)]
pub struct sp_profiles(Vec<DeviceProfile>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let owned = CString::new(message.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error text").expect("static text"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

struct Failure {
    status: sp_status,
    message: String,
}

impl Failure {
    fn new(status: sp_status, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn null(name: &str) -> Self {
        Self::new(
            sp_status::SP_ERR_NULL_ARGUMENT,
            format!("{name} must not be NULL"),
        )
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::Io(_) | Error::Json(_) | Error::Parse { .. } => sp_status::SP_ERR_IO,
            Error::IndependenceUntestable { .. } => sp_status::SP_ERR_UNTESTABLE,
            Error::Overload { .. } => sp_status::SP_ERR_OVERLOAD,
            Error::UnsupportedSize { .. } => sp_status::SP_ERR_UNSUPPORTED_SIZE,
            Error::EmptyFeature { .. }
            | Error::EmptyProfile
            | Error::NotEnoughData(_)
            | Error::SingleClass => sp_status::SP_ERR_EMPTY_INPUT,
            Error::InvalidTrace { .. }
            | Error::InvalidArgument(_)
            | Error::UndefinedDistance
            | Error::UndefinedDivergence { .. }
            | Error::LabelMismatch(_) => sp_status::SP_ERR_INVALID_ARGUMENT,
            _ => sp_status::SP_ERR_OTHER,
        };
        Self::new(status, err.to_string())
    }
}

/// Runs a fallible body, converting failures and panics into status codes.
fn api(body: impl FnOnce() -> Result<(), Failure>) -> sp_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => sp_status::SP_OK,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("panic caught at the C boundary");
            sp_status::SP_ERR_PANIC
        }
    }
}

/// # Safety
/// `ptr` must be NULL or valid for reads for the lifetime `'a`.
unsafe fn req<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::null(name))
}

/// # Safety
/// `ptr` must be NULL or a NUL-terminated string valid for the call.
unsafe fn req_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        Failure::new(
            sp_status::SP_ERR_INVALID_UTF8,
            format!("{name} is not valid UTF-8"),
        )
    })
}

/// # Safety
/// `out` must be NULL or valid for writes.
unsafe fn give<T>(out: *mut *mut T, name: &str, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(name));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// # Safety
/// `out` must be NULL or valid for writes.
unsafe fn put<T>(out: *mut T, name: &str, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(name));
    }
    *out = value;
    Ok(())
}

/// # Safety
/// `buf` must be NULL or valid for writes of `cap` bytes.
unsafe fn write_str(buf: *mut c_char, cap: usize, name: &str, text: &str) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(Failure::null(name));
    }
    let bytes = text.as_bytes();
    if cap < bytes.len() + 1 {
        return Err(Failure::new(
            sp_status::SP_ERR_BUFFER_TOO_SMALL,
            format!("{name} needs {} bytes, got {cap}", bytes.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of a status code, e.g. `"SP_ERR_IO"`.
#[no_mangle]
pub extern "C" fn sp_status_name(status: sp_status) -> *const c_char {
    let name: &'static str = match status {
        sp_status::SP_OK => "SP_OK\0",
        sp_status::SP_ERR_NULL_ARGUMENT => "SP_ERR_NULL_ARGUMENT\0",
        sp_status::SP_ERR_INVALID_UTF8 => "SP_ERR_INVALID_UTF8\0",
        sp_status::SP_ERR_INVALID_ARGUMENT => "SP_ERR_INVALID_ARGUMENT\0",
        sp_status::SP_ERR_BUFFER_TOO_SMALL => "SP_ERR_BUFFER_TOO_SMALL\0",
        sp_status::SP_ERR_IO => "SP_ERR_IO\0",
        sp_status::SP_ERR_EMPTY_INPUT => "SP_ERR_EMPTY_INPUT\0",
        sp_status::SP_ERR_UNTESTABLE => "SP_ERR_UNTESTABLE\0",
        sp_status::SP_ERR_OVERLOAD => "SP_ERR_OVERLOAD\0",
        sp_status::SP_ERR_UNSUPPORTED_SIZE => "SP_ERR_UNSUPPORTED_SIZE\0",
        sp_status::SP_ERR_PANIC => "SP_ERR_PANIC\0",
        sp_status::SP_ERR_OTHER => "SP_ERR_OTHER\0",
    };
    name.as_ptr().cast()
}

/// Message from the most recent failing call on this thread, or an empty
/// string. The pointer stays valid until the next failing call on the same
/// thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a trace from a CSV trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_load(path: *const c_char, out: *mut *mut sp_trace) -> sp_status {
    api(|| {
        let path = req_str(path, "path")?;
        let trace = io::load_trace(path)?;
        give(out, "out", sp_trace(trace))
    })
}

/// Writes a trace to a CSV trace file.
///
/// # Safety
/// `trace` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_save(trace: *const sp_trace, path: *const c_char) -> sp_status {
    api(|| {
        let trace = req(trace, "trace")?;
        let path = req_str(path, "path")?;
        io::save_trace(&trace.0, path)?;
        Ok(())
    })
}

/// Releases a trace handle. NULL is a no-op.
///
/// # Safety
/// `trace` must be NULL or a handle not freed before; it is invalid after.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_free(trace: *mut sp_trace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of packets in the trace; 0 if `trace` is NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_len(trace: *const sp_trace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// Capture duration in seconds; NaN if `trace` is NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_duration(trace: *const sp_trace) -> f64 {
    trace.as_ref().map_or(f64::NAN, |t| t.0.duration())
}

/// Mean packet rate in packets per second; NaN if `trace` is NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_trace_mean_rate(trace: *const sp_trace) -> f64 {
    trace.as_ref().map_or(f64::NAN, |t| t.0.mean_rate())
}

/// Number of devices in the built-in synthetic corpus.
#[no_mangle]
pub extern "C" fn sp_corpus_device_count() -> usize {
    default_corpus().len()
}

/// Writes the NUL-terminated identifier of corpus device `index` into `buf`.
///
/// # Safety
/// `buf` must be valid for writes of `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_corpus_device_id(
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> sp_status {
    api(|| {
        let corpus = default_corpus();
        let spec = corpus.get(index).ok_or_else(|| {
            Failure::new(
                sp_status::SP_ERR_INVALID_ARGUMENT,
                format!("device index {index} out of range 0..{}", corpus.len()),
            )
        })?;
        write_str(buf, cap, "buf", spec.device_id.as_str())
    })
}

/// Synthesises `duration` seconds of traffic for corpus device `index`,
/// seeding the generator with `seed`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_synth_device(
    index: usize,
    duration: f64,
    seed: u64,
    out: *mut *mut sp_trace,
) -> sp_status {
    api(|| {
        let corpus = default_corpus();
        let spec = corpus.get(index).ok_or_else(|| {
            Failure::new(
                sp_status::SP_ERR_INVALID_ARGUMENT,
                format!("device index {index} out of range 0..{}", corpus.len()),
            )
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = synth_device(spec, duration, &mut rng)?;
        give(out, "out", sp_trace(trace))
    })
}

/// Applies slotted-emission shaping: packets are carried on a slot grid of
/// `rate` slots per second, cover packets are injected with probability `q`
/// per period of `period` seconds, and every emitted packet is padded by a
/// random amount up to `pad_window` bytes. Cover sizes are drawn from the
/// input trace's own size distribution.
///
/// # Safety
/// `trace` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_stp_shape(
    trace: *const sp_trace,
    q: f64,
    period: f64,
    rate: f64,
    pad_window: u32,
    seed: u64,
    out: *mut *mut sp_trace,
) -> sp_status {
    api(|| {
        let trace = req(trace, "trace")?;
        let params = StpParams {
            q,
            period,
            rate,
            pad_window,
            cover: size_histogram(&trace.0),
        };
        let padding = params.default_padding();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shaped = stp_shape(&trace.0, &params, &padding, &mut rng)?;
        give(out, "out", sp_trace(shaped))
    })
}

/// Applies constant-rate shaping: a packet of exactly `pad_to` bytes every
/// `1/rate` seconds regardless of real traffic.
///
/// # Safety
/// `trace` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_ilp_shape(
    trace: *const sp_trace,
    rate: f64,
    pad_to: u32,
    out: *mut *mut sp_trace,
) -> sp_status {
    api(|| {
        let trace = req(trace, "trace")?;
        let shaped = ilp_shape(&trace.0, rate, pad_to)?;
        give(out, "out", sp_trace(shaped))
    })
}

/// Learns one profile per trace and marks each device's most frequent
/// corpus-unique packet size.
///
/// # Safety
/// `traces` must point to `len` live trace handles; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_learn(
    traces: *const *const sp_trace,
    len: usize,
    out: *mut *mut sp_profiles,
) -> sp_status {
    api(|| {
        if traces.is_null() {
            return Err(Failure::null("traces"));
        }
        if len == 0 {
            return Err(Failure::new(
                sp_status::SP_ERR_EMPTY_INPUT,
                "need at least one trace to learn profiles",
            ));
        }
        let handles = std::slice::from_raw_parts(traces, len);
        let mut profiles = Vec::with_capacity(len);
        for (i, handle) in handles.iter().enumerate() {
            let trace = req(*handle, &format!("traces[{i}]"))?;
            profiles.push(learn_profile(&trace.0)?);
        }
        assign_unique_sizes(&mut profiles);
        give(out, "out", sp_profiles(profiles))
    })
}

/// Saves profiles into `dir` (created if missing).
///
/// # Safety
/// `profiles` must be a live handle; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_save(
    profiles: *const sp_profiles,
    dir: *const c_char,
) -> sp_status {
    api(|| {
        let profiles = req(profiles, "profiles")?;
        let dir = req_str(dir, "dir")?;
        io::save_profiles(&profiles.0, dir)?;
        Ok(())
    })
}

/// Loads profiles previously written by `sp_profiles_save`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_load(
    dir: *const c_char,
    out: *mut *mut sp_profiles,
) -> sp_status {
    api(|| {
        let dir = req_str(dir, "dir")?;
        let profiles = io::load_profiles(dir)?;
        give(out, "out", sp_profiles(profiles))
    })
}

/// Number of profiles in the set; 0 if `profiles` is NULL.
///
/// # Safety
/// `profiles` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_len(profiles: *const sp_profiles) -> usize {
    profiles.as_ref().map_or(0, |p| p.0.len())
}

/// Writes the NUL-terminated identifier of profile `index` into `buf`.
///
/// # Safety
/// `profiles` must be a live handle; `buf` must be valid for writes of `cap`
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_device_id(
    profiles: *const sp_profiles,
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> sp_status {
    api(|| {
        let profiles = req(profiles, "profiles")?;
        let profile = profiles.0.get(index).ok_or_else(|| {
            Failure::new(
                sp_status::SP_ERR_INVALID_ARGUMENT,
                format!("profile index {index} out of range 0..{}", profiles.0.len()),
            )
        })?;
        write_str(buf, cap, "buf", profile.device_id.as_str())
    })
}

/// Releases a profile-set handle. NULL is a no-op.
///
/// # Safety
/// `profiles` must be NULL or a handle not freed before; it is invalid after.
#[no_mangle]
pub unsafe extern "C" fn sp_profiles_free(profiles: *mut sp_profiles) {
    if !profiles.is_null() {
        drop(Box::from_raw(profiles));
    }
}

/// Classifies a trace against the profiles by nearest packet-size
/// distribution. Writes the winning device identifier into `id_buf` and the
/// cosine distance into `distance_out`.
///
/// # Safety
/// `profiles` and `trace` must be live handles; `id_buf` must be valid for
/// writes of `id_cap` bytes; `distance_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_classify_dominant(
    profiles: *const sp_profiles,
    trace: *const sp_trace,
    id_buf: *mut c_char,
    id_cap: usize,
    distance_out: *mut f64,
) -> sp_status {
    api(|| {
        let profiles = req(profiles, "profiles")?;
        let trace = req(trace, "trace")?;
        let (id, distance) = classify_dominant(&profiles.0, &size_histogram(&trace.0))?;
        write_str(id_buf, id_cap, "id_buf", id.as_str())?;
        put(distance_out, "distance_out", distance)
    })
}

/// Estimates how many of the profiled devices share the aggregate `trace`,
/// from its mean packet rate.
///
/// # Safety
/// `profiles` and `trace` must be live handles; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sp_estimate_count(
    profiles: *const sp_profiles,
    trace: *const sp_trace,
    out: *mut usize,
) -> sp_status {
    api(|| {
        let profiles = req(profiles, "profiles")?;
        let trace = req(trace, "trace")?;
        let thresholds = learn_count_thresholds(&profiles.0)?;
        let count = estimate_count(trace.0.mean_rate(), &thresholds);
        put(out, "out", count)
    })
}

/// Pearson chi-squared independence test between inter-arrival gaps and
/// packet sizes. `reject_out` is true when the statistic exceeds the 95%
/// critical value.
///
/// # Safety
/// `trace` must be a live handle; the four output pointers must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sp_chi_squared(
    trace: *const sp_trace,
    statistic_out: *mut f64,
    df_out: *mut usize,
    critical_out: *mut f64,
    reject_out: *mut bool,
) -> sp_status {
    api(|| {
        let trace = req(trace, "trace")?;
        let result = chi_squared_independence(&trace.0)?;
        put(statistic_out, "statistic_out", result.statistic)?;
        put(df_out, "df_out", result.degrees_of_freedom)?;
        put(critical_out, "critical_out", result.critical_value_95)?;
        put(reject_out, "reject_out", result.reject_independence)
    })
}

/// Cosine distance between two equal-length vectors.
///
/// # Safety
/// `a` and `b` must be valid for reads of `len` doubles; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_cosine_distance(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> sp_status {
    api(|| {
        if a.is_null() {
            return Err(Failure::null("a"));
        }
        if b.is_null() {
            return Err(Failure::null("b"));
        }
        let u = std::slice::from_raw_parts(a, len);
        let v = std::slice::from_raw_parts(b, len);
        put(out, "out", cosine_distance_dense(u, v)?)
    })
}

/// Jensen-Shannon distance (square root of the base-2 divergence, in
/// [0, 1]) between two equal-length non-negative vectors, each treated as an
/// unnormalised distribution over indices.
///
/// # Safety
/// `a` and `b` must be valid for reads of `len` doubles; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn sp_jsd(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> sp_status {
    api(|| {
        if a.is_null() {
            return Err(Failure::null("a"));
        }
        if b.is_null() {
            return Err(Failure::null("b"));
        }
        let sparse = |ptr: *const f64| -> BTreeMap<usize, f64> {
            std::slice::from_raw_parts(ptr, len)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect()
        };
        put(out, "out", jsd(&sparse(a), &sparse(b))?)
    })
}
