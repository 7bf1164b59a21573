use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssdgp::covariance_analysis::{covariance_bound, gf_covariance_recursion, variance_floor, write_recursion_csv, CovRecursionConfig};
use ssdgp::graph::{sample_prior, ModelDescription};
use ssdgp::{DgpModel, Scheme};
use ssdgp_bench::config::read_json_file;
use ssdgp_bench::grid::write_grid_csv;
use ssdgp_bench::ingest::{ingest_strain_csv, interpolation_schedule};
use ssdgp_bench::output::{emit_results, fmt_float, write_csv, write_json, write_timing};
use ssdgp_bench::{grid_search, run_experiment, BenchError, ExperimentConfig, GridSpec, OutputFormat};

#[derive(Parser)]
#[command(name = "ssdgp", version, about = "State-space deep Gaussian process experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trials of one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output path of the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a hyperparameter grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw one path from a model prior.
    SamplePrior {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 10)]
        substeps: usize,
        #[arg(long, default_value = "tme-3")]
        scheme: Scheme,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Posterior cross-covariance recursion of the two-layer linear system.
    CovAnalysis {
        #[arg(long, allow_hyphen_values = true)]
        mu: f64,
        #[arg(long, allow_hyphen_values = true)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long = "R")]
        noise_var: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
        p0_fs: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Read a strain file and report its measurement and interpolation grid.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        noise_var: f64,
        #[arg(long, default_value_t = 1e-5)]
        spacing: f64,
        /// Writes the parsed series as `time,y` CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    AllTrialsFailed,
    Other(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn io_err(e: std::io::Error) -> Failure {
    Failure::Other(e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, output } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = run_experiment(&cfg)?;
            let path = output.or_else(|| cfg.output.path.as_ref().map(|p| cfg.base_dir.join(p)));
            match path {
                Some(p) => emit_results(&report, cfg.output.format, &p).map_err(|e| Failure::Other(e.to_string()))?,
                None => {
                    let mut out = std::io::stdout().lock();
                    match cfg.output.format {
                        OutputFormat::Csv => write_csv(&report, &mut out),
                        OutputFormat::Json => write_json(&report, &mut out),
                    }
                    .map_err(io_err)?;
                    write_timing(&report, std::io::stderr().lock()).map_err(io_err)?;
                }
            }
            for t in report.trials.iter().filter(|t| !t.succeeded()) {
                eprintln!("trial {} failed: {}", t.trial, t.error.as_deref().unwrap_or(""));
            }
            if report.all_failed() {
                return Err(Failure::AllTrialsFailed);
            }
        }
        Command::Grid { config, grid, output } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let spec: GridSpec = read_json_file(&grid)?;
            let report = grid_search(&cfg, &spec)?;
            write_grid_csv(&report, open_output(output.as_deref())?).map_err(io_err)?;
            match report.best_row() {
                Some(best) => eprintln!(
                    "best: lengthscale={} magnitude={} fixed_magnitude={:?} score={}",
                    best.cell.lengthscale,
                    best.cell.magnitude,
                    best.cell.fixed_magnitude,
                    best.score.map(fmt_float).unwrap_or_default()
                ),
                None => return Err(Failure::AllTrialsFailed),
            }
        }
        Command::SamplePrior { model, seed, points, t_end, substeps, scheme, output } => {
            let desc: ModelDescription = read_json_file(&model)?;
            let model = DgpModel::new(desc.nodes).map_err(|e| Failure::Config(format!("model: {e}")))?;
            if points < 2 || !(t_end > 0.0) || substeps == 0 {
                return Err(Failure::Config("need at least two points, positive t_end and substeps".into()));
            }
            let grid: Vec<f64> = (0..points).map(|i| t_end * i as f64 / (points - 1) as f64).collect();
            let sample = sample_prior(&model, &grid, substeps, scheme, seed, None).map_err(|e| Failure::Other(e.to_string()))?;
            let mut out = open_output(output.as_deref())?;
            let names: Vec<String> = model.nodes().iter().map(|n| format!("u_{}_{}", n.id.layer, n.id.position)).collect();
            writeln!(out, "t,{}", names.join(",")).map_err(io_err)?;
            let paths: Vec<Vec<f64>> = (0..model.nodes().len()).map(|i| sample.node_trajectory(&model, i)).collect();
            for (k, t) in sample.times.iter().enumerate() {
                let row: Vec<String> = paths.iter().map(|p| fmt_float(p[k])).collect();
                writeln!(out, "{},{}", fmt_float(*t), row.join(",")).map_err(io_err)?;
            }
            out.flush().map_err(io_err)?;
        }
        Command::CovAnalysis { mu, a, b, dt, noise_var, steps, p0_fs, output } => {
            let cfg = CovRecursionConfig::new(mu, a, b, dt, noise_var, steps, p0_fs);
            let rec = gf_covariance_recursion(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            let bound = covariance_bound(&rec);
            let mut out = open_output(output.as_deref())?;
            write_recursion_csv(&rec, &bound, &mut out).map_err(io_err)?;
            out.flush().map_err(io_err)?;
            eprintln!("bound holds: {}", bound.holds);
            if let Ok(floor) = variance_floor(&cfg, None) {
                eprintln!("variance floor: {}", fmt_float(floor.floor));
            }
        }
        Command::Ingest { input, noise_var, spacing, output } => {
            let data = ingest_strain_csv(&input, noise_var)?;
            let schedule = interpolation_schedule(&data, spacing)?;
            eprintln!(
                "{} measurements on [{}, {}], {} filter steps with {} prediction-only",
                data.len(),
                data.times[0],
                data.times[data.len() - 1],
                schedule.len(),
                schedule.len() - schedule.measurement_count()
            );
            if let Some(p) = output {
                let mut out = open_output(Some(&p))?;
                writeln!(out, "time,y").map_err(io_err)?;
                for (t, y) in data.times.iter().zip(&data.y) {
                    writeln!(out, "{},{}", fmt_float(*t), fmt_float(*y)).map_err(io_err)?;
                }
                out.flush().map_err(io_err)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::AllTrialsFailed) => {
            eprintln!("error: every trial failed");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
