//! Result files. Wall times go to a separate sidecar so that result files depend only on
//! the configuration and the seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::OutputFormat;
use crate::error::{BenchError, Result};
use crate::experiment::{ExperimentReport, Stat};

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_else(|| "NA".into())
}

pub fn write_csv<W: Write>(report: &ExperimentReport, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "# solver={} trials={} failures={}",
        report.solver.name(),
        report.trials.len(),
        report.summary.failures
    )?;
    writeln!(out, "trial,seed,status,rmse,nlpd")?;
    for t in &report.trials {
        let status = if t.succeeded() { "ok" } else { "failed" };
        writeln!(out, "{},{},{},{},{}", t.trial, t.seed, status, fmt_opt(t.rmse), fmt_opt(t.nlpd))?;
    }
    let s = &report.summary;
    let pick = |st: Option<Stat>, f: fn(Stat) -> f64| fmt_opt(st.map(f));
    writeln!(out, "mean,,,{},{}", pick(s.rmse, |x| x.mean), pick(s.nlpd, |x| x.mean))?;
    writeln!(out, "std,,,{},{}", pick(s.rmse, |x| x.std), pick(s.nlpd, |x| x.std))?;
    Ok(())
}

pub fn write_json<W: Write>(report: &ExperimentReport, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)
}

/// `<path>.timing.csv` next to the result file.
pub fn timing_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".timing.csv");
    PathBuf::from(name)
}

pub fn write_timing<W: Write>(report: &ExperimentReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "trial,wall_time_s")?;
    for t in &report.trials {
        writeln!(out, "{},{}", t.trial, fmt_float(t.wall_time))?;
    }
    Ok(())
}

fn write_file(path: &Path, write: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| BenchError::io(path, e))
}

/// Writes the result file and its timing sidecar.
pub fn emit_results(report: &ExperimentReport, format: OutputFormat, path: &Path) -> Result<()> {
    write_file(path, |w| match format {
        OutputFormat::Csv => write_csv(report, w),
        OutputFormat::Json => write_json(report, w),
    })?;
    write_file(&timing_path(path), |w| write_timing(report, w))
}
