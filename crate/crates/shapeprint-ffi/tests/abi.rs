//! Exercises the C ABI the way a foreign caller would: raw pointers, status
//! codes, caller-owned buffers, and explicit frees.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use shapeprint::model::{PacketRecord, Trace};
use shapeprint_ffi::*;

fn c_str(text: &str) -> CString {
    CString::new(text).expect("no interior NUL")
}

unsafe fn read_buf(buf: &[c_char]) -> String {
    CStr::from_ptr(buf.as_ptr())
        .to_str()
        .expect("ABI strings are UTF-8")
        .to_owned()
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(sp_last_error_message())
            .to_str()
            .expect("error text is UTF-8")
            .to_owned()
    }
}

unsafe fn synth(index: usize, duration: f64, seed: u64) -> *mut sp_trace {
    let mut trace = ptr::null_mut();
    assert_eq!(
        sp_synth_device(index, duration, seed, &mut trace),
        sp_status::SP_OK,
        "{}",
        last_error()
    );
    assert!(!trace.is_null());
    trace
}

unsafe fn shape(trace: *const sp_trace, seed: u64) -> *mut sp_trace {
    let mut shaped = ptr::null_mut();
    assert_eq!(
        sp_stp_shape(trace, 0.1, 1.0, 100.0, 80, seed, &mut shaped),
        sp_status::SP_OK,
        "{}",
        last_error()
    );
    shaped
}

#[test]
fn version_and_status_names_are_static_strings() {
    unsafe {
        let version = CStr::from_ptr(sp_version()).to_str().unwrap();
        assert_eq!(version, env!("CARGO_PKG_VERSION"));
        let ok = CStr::from_ptr(sp_status_name(sp_status::SP_OK))
            .to_str()
            .unwrap();
        assert_eq!(ok, "SP_OK");
        let io = CStr::from_ptr(sp_status_name(sp_status::SP_ERR_IO))
            .to_str()
            .unwrap();
        assert_eq!(io, "SP_ERR_IO");
    }
}

#[test]
fn corpus_enumeration_and_buffer_contract() {
    unsafe {
        let n = sp_corpus_device_count();
        assert_eq!(n, 14);

        let mut buf = [0 as c_char; 64];
        assert_eq!(
            sp_corpus_device_id(0, buf.as_mut_ptr(), buf.len()),
            sp_status::SP_OK
        );
        assert_eq!(read_buf(&buf), "plug-01");

        // Too-small buffer: reports the required size, writes nothing.
        let mut tiny = [42 as c_char; 3];
        assert_eq!(
            sp_corpus_device_id(0, tiny.as_mut_ptr(), tiny.len()),
            sp_status::SP_ERR_BUFFER_TOO_SMALL
        );
        assert!(last_error().contains("8 bytes"), "{}", last_error());
        assert_eq!(tiny, [42 as c_char; 3]);

        assert_eq!(
            sp_corpus_device_id(n + 1, buf.as_mut_ptr(), buf.len()),
            sp_status::SP_ERR_INVALID_ARGUMENT
        );
        assert!(last_error().contains("out of range"));
    }
}

#[test]
fn synth_shape_learn_classify_count_pipeline() {
    unsafe {
        let raw_a = synth(0, 600.0, 1);
        let raw_b = synth(1, 600.0, 2);
        assert!(sp_trace_len(raw_a) > 0);
        assert!((sp_trace_duration(raw_a) - 600.0).abs() < 1e-9);
        assert!(sp_trace_mean_rate(raw_a) > 0.0);

        let shaped_a = shape(raw_a, 11);
        let shaped_b = shape(raw_b, 12);
        // Shaping only adds cover traffic.
        assert!(sp_trace_len(shaped_a) >= sp_trace_len(raw_a));

        let handles = [shaped_a as *const sp_trace, shaped_b as *const sp_trace];
        let mut profiles = ptr::null_mut();
        assert_eq!(
            sp_profiles_learn(handles.as_ptr(), handles.len(), &mut profiles),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert_eq!(sp_profiles_len(profiles), 2);

        let mut id = [0 as c_char; 64];
        let mut distance = f64::NAN;
        assert_eq!(
            sp_classify_dominant(profiles, shaped_a, id.as_mut_ptr(), id.len(), &mut distance),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert_eq!(read_buf(&id), "plug-01");
        assert!((0.0..=1.0).contains(&distance));

        let mut count = 0usize;
        assert_eq!(
            sp_estimate_count(profiles, shaped_a, &mut count),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert!((1..=2).contains(&count), "count {count}");

        sp_profiles_free(profiles);
        for t in [raw_a, raw_b, shaped_a, shaped_b] {
            sp_trace_free(t);
        }
    }
}

#[test]
fn trace_and_profile_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = c_str(dir.path().join("device.trace").to_str().unwrap());
    let profile_dir = c_str(dir.path().join("profiles").to_str().unwrap());
    unsafe {
        let trace = synth(2, 300.0, 3);
        assert_eq!(sp_trace_save(trace, trace_path.as_ptr()), sp_status::SP_OK);

        let mut reloaded = ptr::null_mut();
        assert_eq!(
            sp_trace_load(trace_path.as_ptr(), &mut reloaded),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert_eq!(sp_trace_len(reloaded), sp_trace_len(trace));
        assert_eq!(sp_trace_duration(reloaded), sp_trace_duration(trace));

        let handles = [trace as *const sp_trace];
        let mut profiles = ptr::null_mut();
        assert_eq!(
            sp_profiles_learn(handles.as_ptr(), 1, &mut profiles),
            sp_status::SP_OK
        );
        assert_eq!(
            sp_profiles_save(profiles, profile_dir.as_ptr()),
            sp_status::SP_OK,
            "{}",
            last_error()
        );

        let mut loaded = ptr::null_mut();
        assert_eq!(
            sp_profiles_load(profile_dir.as_ptr(), &mut loaded),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert_eq!(sp_profiles_len(loaded), 1);
        let mut id = [0 as c_char; 64];
        assert_eq!(
            sp_profiles_device_id(loaded, 0, id.as_mut_ptr(), id.len()),
            sp_status::SP_OK
        );
        assert_eq!(read_buf(&id), "plug-03");

        sp_profiles_free(profiles);
        sp_profiles_free(loaded);
        sp_trace_free(trace);
        sp_trace_free(reloaded);
    }
}

#[test]
fn error_paths_set_codes_and_messages() {
    unsafe {
        // NULL arguments.
        let mut out = ptr::null_mut();
        assert_eq!(
            sp_trace_load(ptr::null(), &mut out),
            sp_status::SP_ERR_NULL_ARGUMENT
        );
        assert_eq!(last_error(), "path must not be NULL");
        assert_eq!(sp_trace_len(ptr::null()), 0);
        assert!(sp_trace_duration(ptr::null()).is_nan());
        assert!(sp_trace_mean_rate(ptr::null()).is_nan());
        sp_trace_free(ptr::null_mut());
        sp_profiles_free(ptr::null_mut());

        // Missing file.
        let missing = c_str("/nonexistent/path/device.trace");
        assert_eq!(
            sp_trace_load(missing.as_ptr(), &mut out),
            sp_status::SP_ERR_IO
        );
        assert!(!last_error().is_empty());

        // Invalid UTF-8 path.
        let bad = CString::new(vec![0x66u8, 0xFF, 0xFE]).unwrap();
        assert_eq!(
            sp_trace_load(bad.as_ptr(), &mut out),
            sp_status::SP_ERR_INVALID_UTF8
        );

        // Parameter outside its domain.
        let trace = synth(0, 60.0, 4);
        let mut shaped = ptr::null_mut();
        assert_eq!(
            sp_stp_shape(trace, 1.5, 1.0, 100.0, 80, 0, &mut shaped),
            sp_status::SP_ERR_INVALID_ARGUMENT
        );

        // Rate far below the device's real rate: shaping overloads.
        let camera = synth(12, 120.0, 5);
        assert_eq!(
            sp_stp_shape(camera, 0.1, 1.0, 1.0, 80, 0, &mut shaped),
            sp_status::SP_ERR_OVERLOAD
        );
        assert!(last_error().contains("overload"), "{}", last_error());

        // Learning from zero traces.
        let mut profiles = ptr::null_mut();
        let none: [*const sp_trace; 0] = [];
        assert_eq!(
            sp_profiles_learn(none.as_ptr(), 0, &mut profiles),
            sp_status::SP_ERR_EMPTY_INPUT
        );

        sp_trace_free(trace);
        sp_trace_free(camera);
    }
}

#[test]
fn chi_squared_reports_the_planted_structure() {
    // A trace whose gaps and sizes are exactly balanced: two gap values, two
    // size values, every combination equally frequent.
    let mut packets = Vec::new();
    let mut t = 0.0;
    for i in 0..2001u32 {
        t += if i % 2 == 0 { 2.0 } else { 8.0 };
        let size = if i % 4 < 2 { 100 } else { 1500 };
        packets.push(PacketRecord::real(t, size, None));
    }
    let trace = Trace::new(packets, t + 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("balanced.trace");
    shapeprint::io::save_trace(&trace, &path).unwrap();

    unsafe {
        let c_path = c_str(path.to_str().unwrap());
        let mut handle = ptr::null_mut();
        assert_eq!(
            sp_trace_load(c_path.as_ptr(), &mut handle),
            sp_status::SP_OK
        );

        let mut statistic = f64::NAN;
        let mut df = 0usize;
        let mut critical = f64::NAN;
        let mut reject = true;
        assert_eq!(
            sp_chi_squared(handle, &mut statistic, &mut df, &mut critical, &mut reject),
            sp_status::SP_OK,
            "{}",
            last_error()
        );
        assert_eq!(statistic, 0.0);
        assert!(df >= 1);
        assert!(critical > 0.0);
        assert!(!reject);

        sp_trace_free(handle);
    }
}

#[test]
fn vector_metrics_match_their_definitions() {
    unsafe {
        let a = [1.0, 2.0, 3.0, 0.0];
        let b = [2.0, 4.0, 6.0, 0.0];
        let c = [0.0, 0.0, 0.0, 5.0];

        let mut d = f64::NAN;
        assert_eq!(
            sp_cosine_distance(a.as_ptr(), b.as_ptr(), a.len(), &mut d),
            sp_status::SP_OK
        );
        assert!(d.abs() < 1e-12, "parallel vectors, got {d}");
        assert_eq!(
            sp_cosine_distance(a.as_ptr(), c.as_ptr(), a.len(), &mut d),
            sp_status::SP_OK
        );
        assert!((d - 1.0).abs() < 1e-12, "orthogonal vectors, got {d}");

        let mut j = f64::NAN;
        assert_eq!(
            sp_jsd(a.as_ptr(), b.as_ptr(), a.len(), &mut j),
            sp_status::SP_OK
        );
        assert!(j.abs() < 1e-9, "identical distributions, got {j}");
        assert_eq!(
            sp_jsd(a.as_ptr(), c.as_ptr(), a.len(), &mut j),
            sp_status::SP_OK
        );
        assert!((j - 1.0).abs() < 1e-12, "disjoint supports, got {j}");

        assert_eq!(
            sp_cosine_distance(ptr::null(), b.as_ptr(), 4, &mut d),
            sp_status::SP_ERR_NULL_ARGUMENT
        );
    }
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/shapeprint.h"),
    )
    .expect("header is generated by the build script");
    for symbol in [
        "sp_status",
        "sp_trace_load",
        "sp_trace_free",
        "sp_stp_shape",
        "sp_ilp_shape",
        "sp_profiles_learn",
        "sp_classify_dominant",
        "sp_estimate_count",
        "sp_chi_squared",
        "sp_jsd",
        "sp_last_error_message",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
