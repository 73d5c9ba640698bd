//! Trace and profile persistence.
//!
//! Traces are line-oriented CSV: an optional `# duration_s=…` metadata line,
//! a mandatory header, then one packet per line as
//! `timestamp_s,size_bytes,device_id,is_cover,is_attack`. A `-` device id
//! denotes aggregated traffic; booleans are `0`/`1`. Floats are written with
//! Rust's shortest round-trip formatting, so `load(save(x)) == x` exactly.
//!
//! Profiles are stored as pretty-printed JSON (`profiles.json` inside a
//! store directory): a list of device profiles in learnt order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fingerprint::DeviceProfile;
use crate::model::{DeviceId, PacketRecord, Trace};

pub const TRACE_HEADER: &str = "timestamp_s,size_bytes,device_id,is_cover,is_attack";
pub const PROFILES_FILE: &str = "profiles.json";

/// Serializes a trace to its line format.
pub fn trace_to_string(trace: &Trace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# duration_s={}", trace.duration());
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for p in trace.packets() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.timestamp,
            p.size,
            p.device_id.as_ref().map_or("-", |d| d.as_str()),
            p.is_cover as u8,
            p.is_attack as u8,
        );
    }
    out
}

/// Attaches the offending path to an I/O error; `fs` errors alone don't
/// name the file.
fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_to_string(trace)).map_err(|e| with_path(path, e))?;
    Ok(())
}

/// Parses a trace from its line format; `path` is used only in error
/// messages.
pub fn trace_from_str(text: &str, path: &str) -> Result<Trace> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().peekable();

    let mut duration = None;
    if let Some(&(_, line)) = lines.peek() {
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            duration = Some(
                rest.strip_prefix("duration_s=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| err(1, format!("bad metadata line: {rest:?}")))?,
            );
            lines.next();
        }
    }
    match lines.next() {
        Some((_, line)) if line.trim() == TRACE_HEADER => {}
        Some((n, line)) => return Err(err(n + 1, format!("expected header, got {line:?}"))),
        None => return Err(err(1, "missing header".into())),
    }

    let mut packets = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(
                n + 1,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let timestamp: f64 = fields[0]
            .parse()
            .map_err(|e| err(n + 1, format!("bad timestamp: {e}")))?;
        let size: u32 = fields[1]
            .parse()
            .map_err(|e| err(n + 1, format!("bad size: {e}")))?;
        let device_id = match fields[2] {
            "-" => None,
            id => Some(DeviceId::new(id)),
        };
        let flag = |field: &str, name: &str| match field {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(err(n + 1, format!("bad {name} flag: {other:?}"))),
        };
        packets.push(PacketRecord {
            timestamp,
            size,
            device_id,
            is_cover: flag(fields[3], "is_cover")?,
            is_attack: flag(fields[4], "is_attack")?,
        });
    }

    let duration = duration.unwrap_or_else(|| {
        packets
            .last()
            .map_or(0.0, |p| p.timestamp)
            .max(f64::MIN_POSITIVE)
    });
    Trace::new(packets, duration)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    trace_from_str(&text, &path.display().to_string())
}

/// Writes profiles to `dir/profiles.json` (or to `dir` itself when it ends
/// in `.json`), returning the file path.
pub fn save_profiles(profiles: &[DeviceProfile], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let path = if dir.extension().is_some_and(|e| e == "json") {
        dir.to_path_buf()
    } else {
        fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
        dir.join(PROFILES_FILE)
    };
    let json = serde_json::to_string_pretty(profiles)?;
    fs::write(&path, json).map_err(|e| with_path(&path, e))?;
    Ok(path)
}

/// Loads profiles saved by [`save_profiles`].
pub fn load_profiles(dir: impl AsRef<Path>) -> Result<Vec<DeviceProfile>> {
    let dir = dir.as_ref();
    let path = if dir.extension().is_some_and(|e| e == "json") {
        dir.to_path_buf()
    } else {
        dir.join(PROFILES_FILE)
    };
    let text = fs::read_to_string(&path).map_err(|e| with_path(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::learn_profile;
    use crate::model::Trace;

    fn sample_trace() -> Trace {
        let packets: Vec<_> = (0..1000)
            .map(|i| PacketRecord {
                timestamp: i as f64 * 0.0137,
                size: 54 + (i % 200),
                device_id: if i % 3 == 0 {
                    None
                } else {
                    Some(DeviceId::new(format!("dev-{}", i % 4)))
                },
                is_cover: i % 2 == 0,
                is_attack: i % 17 == 0,
            })
            .collect();
        Trace::new(packets, 14.0).unwrap()
    }

    #[test]
    fn trace_round_trip_is_bit_identical() {
        let trace = sample_trace();
        let text = trace_to_string(&trace);
        let back = trace_from_str(&text, "mem").unwrap();
        assert_eq!(back, trace);
        assert_eq!(trace_to_string(&back), text);
    }

    #[test]
    fn trace_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trace = sample_trace();
        save_trace(&trace, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), trace);
    }

    #[test]
    fn missing_header_is_a_parse_error() {
        assert!(matches!(
            trace_from_str("1.0,100,-,0,0\n", "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(trace_from_str("", "mem").is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{TRACE_HEADER}\n0.5,100,-,0,0\n0.7,nan_size,-,0,0\n");
        match trace_from_str(&text, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_flags_are_rejected() {
        let text = format!("{TRACE_HEADER}\n0.5,100,-,2,0\n");
        assert!(trace_from_str(&text, "mem").is_err());
    }

    #[test]
    fn profiles_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut profiles = Vec::new();
        for (i, sizes) in [[100u32, 100, 200], [700, 800, 800], [54, 54, 54]]
            .iter()
            .enumerate()
        {
            let packets: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(j, &s)| {
                    PacketRecord::real(j as f64, s, Some(DeviceId::new(format!("d{i}"))))
                })
                .collect();
            profiles.push(learn_profile(&Trace::new(packets, 3.0).unwrap()).unwrap());
        }
        let path = save_profiles(&profiles, dir.path()).unwrap();
        assert!(path.ends_with(PROFILES_FILE));
        let back = load_profiles(dir.path()).unwrap();
        assert_eq!(back, profiles);
    }
}
