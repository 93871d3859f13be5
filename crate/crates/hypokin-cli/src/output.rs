//! Serialized artifacts: series.csv, JSON documents and the sweep summary.

use std::fmt::Write as _;
use std::path::Path;

use hypokin::hypocoercivity::DecayReport;
use serde::Serialize;

use crate::error::CliError;

/// 17 significant digits: round-trip exact for `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders the series table. Base columns always appear; the optional ones
/// follow in fixed order when the run produced them.
pub fn series_csv(r: &DecayReport) -> String {
    let mut cols: Vec<(&str, &[f64])> = vec![
        ("t", &r.times),
        ("l2", &r.l2),
        ("h1", &r.h1),
        ("lyapunov", &r.lyapunov),
        ("lambda", &r.lambda),
        ("mass", &r.mass),
    ];
    for (name, s) in [
        ("momentum", &r.momentum),
        ("energy", &r.energy),
        ("field_energy", &r.field_energy),
        ("fmin", &r.fmin),
        ("fmax", &r.fmax),
        ("f2", &r.f2),
    ] {
        if let Some(v) = s {
            cols.push((name, v));
        }
    }
    let mut out = String::new();
    let header: Vec<&str> = cols.iter().map(|(n, _)| *n).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..r.times.len() {
        let row: Vec<String> = cols.iter().map(|(_, v)| fmt_f64(v[i])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
