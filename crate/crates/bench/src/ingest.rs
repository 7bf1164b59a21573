//! Reading strain-style time series from text files.
//!
//! Accepted layouts, with `,` or whitespace as separator:
//!
//! - `time,strain` rows;
//! - `index,strain` or bare `strain` rows after a `# rate: <Hz>` comment, with
//!   `time = index / rate` (bare rows are numbered from zero).
//!
//! Lines starting with `#` are comments, and a single non-numeric header line is skipped.

use std::path::Path;

use ssdgp::{Schedule, TimeSeriesData};

use crate::error::{BenchError, Result};

fn parse_rate(comment: &str) -> Option<f64> {
    let body = comment.trim_start_matches('#').trim();
    let (key, value) = body.split_once([':', '='])?;
    let key = key.trim().to_ascii_lowercase();
    if key == "rate" || key == "sample_rate" || key == "sampling_rate" {
        value.trim().trim_end_matches("Hz").trim().parse().ok()
    } else {
        None
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
}

/// Parses strain text. Every measurement gets the noise variance `noise_var`.
pub fn parse_strain(text: &str, noise_var: f64) -> Result<TimeSeriesData> {
    let mut rate: Option<f64> = None;
    let mut times = Vec::new();
    let mut y = Vec::new();
    let mut header_allowed = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(r) = parse_rate(line) {
                if !(r > 0.0) {
                    return Err(BenchError::Parse { line: lineno, message: "sample rate must be positive".into() });
                }
                rate = Some(r);
            }
            continue;
        }
        let cols = fields(line);
        let values: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if header_allowed => {
                header_allowed = false;
                continue;
            }
            Err(e) => return Err(BenchError::Parse { line: lineno, message: e.to_string() }),
        };
        header_allowed = false;
        let (t, v) = match (values.as_slice(), rate) {
            ([t, v], None) => (*t, *v),
            ([i, v], Some(r)) => (*i / r, *v),
            ([v], Some(r)) => (y.len() as f64 / r, *v),
            ([_], None) => {
                return Err(BenchError::Parse {
                    line: lineno,
                    message: "single-column rows need a '# rate: <Hz>' comment".into(),
                })
            }
            _ => {
                return Err(BenchError::Parse { line: lineno, message: format!("expected 1 or 2 columns, got {}", values.len()) })
            }
        };
        if !t.is_finite() || !v.is_finite() {
            return Err(BenchError::Parse { line: lineno, message: "non-finite value".into() });
        }
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(BenchError::Parse { line: lineno, message: format!("time {t} does not increase (previous {prev})") });
            }
        }
        times.push(t);
        y.push(v);
    }
    if times.is_empty() {
        return Err(BenchError::Config("no measurements in input".into()));
    }
    let n = times.len();
    Ok(TimeSeriesData::new(times, y, vec![noise_var; n], None)?)
}

pub fn ingest_strain_csv(path: &Path, noise_var: f64) -> Result<TimeSeriesData> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    parse_strain(&text, noise_var)
}

/// Filter schedule with prediction-only steps every `spacing` seconds between measurements.
pub fn interpolation_schedule(data: &TimeSeriesData, spacing: f64) -> Result<Schedule> {
    Ok(Schedule::with_interpolation(data, spacing)?)
}
