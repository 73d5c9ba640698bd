//! Report emission: CSV tables, ASCII and PGM heatmaps, JSON summaries.
//!
//! Everything is plain text so reports diff cleanly and reproduce
//! byte-for-byte under a fixed config and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

/// Shade ramp from empty to full; darker (later) characters mean larger
/// values.
const RAMP: &[u8] = b" .:-=+*#%@";

fn csv_field(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes a CSV file with a header row.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}",
        header
            .iter()
            .map(|h| csv_field(h))
            .collect::<Vec<_>>()
            .join(",")
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{}",
            row.iter()
                .map(|f| csv_field(f))
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a labeled matrix as CSV: corner label, column labels, then one
/// labeled row per matrix row.
pub fn write_matrix_csv(
    path: impl AsRef<Path>,
    corner: &str,
    col_labels: &[String],
    row_labels: &[String],
    entries: &[Vec<f64>],
) -> Result<()> {
    let header: Vec<&str> = std::iter::once(corner)
        .chain(col_labels.iter().map(|s| s.as_str()))
        .collect();
    let rows: Vec<Vec<String>> = row_labels
        .iter()
        .zip(entries)
        .map(|(label, row)| {
            std::iter::once(label.clone())
                .chain(row.iter().map(|v| format!("{v}")))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn bounds(entries: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in entries {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn shade(v: f64, lo: f64, hi: f64, levels: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let norm = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((norm * (levels - 1) as f64).round() as usize).min(levels - 1)
}

/// Renders a matrix as an ASCII heatmap; larger values print darker.
pub fn ascii_heatmap(entries: &[Vec<f64>]) -> String {
    let (lo, hi) = bounds(entries);
    let mut out = String::new();
    for row in entries {
        for &v in row {
            let c = RAMP[shade(v, lo, hi, RAMP.len())] as char;
            out.push(c);
            out.push(c);
        }
        out.push('\n');
    }
    out
}

/// Writes a matrix as a portable graymap (PGM, P2): one `cell`-pixel square
/// per entry, larger values darker.
pub fn write_pgm(path: impl AsRef<Path>, entries: &[Vec<f64>], cell: usize) -> Result<()> {
    let (lo, hi) = bounds(entries);
    let rows = entries.len();
    let cols = entries.first().map_or(0, Vec::len);
    let mut out = format!("P2\n{} {}\n255\n", cols * cell, rows * cell);
    for row in entries {
        let mut line = String::new();
        for &v in row {
            let px = 255 - shade(v, lo, hi, 256);
            for _ in 0..cell {
                let _ = write!(line, "{px} ");
            }
        }
        let line = line.trim_end();
        for _ in 0..cell {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a pretty-printed JSON value.
pub fn write_json(path: impl AsRef<Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
