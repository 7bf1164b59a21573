//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssdgp::graph::ModelDescription;
use ssdgp::optim::LbfgsOptions;
use ssdgp::{DgpModel, Scheme};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    GpMle,
    Bmap,
    Ssmap,
    Ekfs,
    Ckfs,
    Pf,
    Pfbs,
}

impl SolverKind {
    pub fn is_state_space(self) -> bool {
        !matches!(self, SolverKind::GpMle | SolverKind::Bmap)
    }

    /// MAP solvers produce point estimates only.
    pub fn reports_nlpd(self) -> bool {
        !matches!(self, SolverKind::Bmap | SolverKind::Ssmap)
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::GpMle => "gp-mle",
            SolverKind::Bmap => "bmap",
            SolverKind::Ssmap => "ssmap",
            SolverKind::Ekfs => "ekfs",
            SolverKind::Ckfs => "ckfs",
            SolverKind::Pf => "pf",
            SolverKind::Pfbs => "pfbs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Rectangle {
        samples: usize,
        #[serde(default = "rectangle_noise")]
        noise_var: f64,
    },
    Sinusoid {
        samples: usize,
        #[serde(default = "sinusoid_noise")]
        noise_var: f64,
    },
    /// Strain-style CSV file, see [`crate::ingest`].
    File {
        path: PathBuf,
        noise_var: f64,
        /// Adds prediction-only filter steps at this spacing between measurements.
        #[serde(default)]
        interpolation: Option<f64>,
    },
}

fn rectangle_noise() -> f64 {
    0.002
}

fn sinusoid_noise() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(ModelDescription),
}

impl ModelSource {
    pub fn load(&self, base: &Path) -> Result<ModelDescription> {
        match self {
            ModelSource::Inline(d) => Ok(d.clone()),
            ModelSource::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                read_json_file(&path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub particles: usize,
    pub trajectories: usize,
    /// Smoothness of the stationary GP baseline.
    pub gp_alpha: usize,
    pub lbfgs: LbfgsOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { particles: 5000, trajectories: 200, gp_alpha: 1, lbfgs: LbfgsOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: Option<ModelSource>,
    pub solver: SolverKind,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: SolverOptions,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| BenchError::Json { path: path.display().to_string(), source })
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json_file(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        match self.solver {
            SolverKind::GpMle | SolverKind::Bmap => {
                if let Some(s) = self.scheme {
                    return bad(format!("solver {} takes no discretization scheme (got {s})", self.solver.name()));
                }
            }
            _ => {}
        }
        if self.solver != SolverKind::GpMle && self.model.is_none() {
            return bad(format!("solver {} needs a model", self.solver.name()));
        }
        if matches!(self.solver, SolverKind::Pf | SolverKind::Pfbs) && self.options.particles < 2 {
            return bad("particle solvers need at least two particles".into());
        }
        if self.solver == SolverKind::Pfbs && self.options.trajectories == 0 {
            return bad("backward simulation needs at least one trajectory".into());
        }
        match &self.data {
            DataSource::Rectangle { samples, noise_var } | DataSource::Sinusoid { samples, noise_var } => {
                if *samples == 0 {
                    return bad("signal needs at least one sample".into());
                }
                if !(*noise_var > 0.0) {
                    return bad("noise variance must be positive".into());
                }
            }
            DataSource::File { noise_var, interpolation, .. } => {
                if !(*noise_var > 0.0) {
                    return bad("noise variance must be positive".into());
                }
                if interpolation.is_some_and(|s| !(s > 0.0)) {
                    return bad("interpolation spacing must be positive".into());
                }
                if interpolation.is_some() && !self.solver.is_state_space() {
                    return bad("interpolation only applies to state-space solvers".into());
                }
            }
        }
        Ok(())
    }

    /// Scheme for state-space solvers. Third-order TME unless configured.
    pub fn scheme(&self) -> Scheme {
        self.scheme.unwrap_or_default()
    }

    pub fn model_description(&self) -> Result<Option<ModelDescription>> {
        self.model.as_ref().map(|m| m.load(&self.base_dir)).transpose()
    }

    pub fn build_model(&self) -> Result<Option<DgpModel>> {
        match self.model_description()? {
            Some(d) => Ok(Some(DgpModel::new(d.nodes).map_err(|e| BenchError::Config(format!("model: {e}")))?)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|source| BenchError::Json { path: "-".into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn full_config_parses() {
        let cfg = parse(
            r#"{
                "data": {"kind": "rectangle", "samples": 100},
                "model": {"nodes": [
                    {"id": [1, 1], "alpha": 1, "lengthscale": {"parent": [2, 1]}, "magnitude": {"fixed": 1.5}},
                    {"id": [2, 1], "alpha": 0, "lengthscale": {"fixed": 0.1}, "magnitude": {"fixed": 1.0}}
                ]},
                "solver": "ckfs",
                "scheme": "tme-3",
                "trials": 3,
                "seed": 9,
                "options": {"particles": 100},
                "output": {"path": "out.csv", "format": "json"}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.solver, SolverKind::Ckfs);
        assert_eq!(cfg.scheme(), Scheme::Tme(3));
        assert_eq!(cfg.data, DataSource::Rectangle { samples: 100, noise_var: 0.002 });
        assert_eq!(cfg.options.particles, 100);
        assert_eq!(cfg.options.trajectories, 200);
        assert_eq!(cfg.output.format, OutputFormat::Json);
        let model = cfg.build_model().unwrap().unwrap();
        assert_eq!(model.state_dim(), 3);
    }

    #[test]
    fn scheme_compatibility() {
        let err = parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "gp-mle", "scheme": "em"}"#);
        assert!(matches!(err, Err(BenchError::Config(_))));
        let err = parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "ekfs"}"#);
        assert!(matches!(err, Err(BenchError::Config(_))), "missing model");
        let ok = parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "gp-mle"}"#).unwrap();
        assert_eq!(ok.trials, 1);
        assert!(parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "magic"}"#).is_err());
        assert!(parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "gp-mle", "scheme": "tme-9"}"#).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(parse(r#"{"data": {"kind": "sinusoid", "samples": 10}, "solver": "gp-mle", "seeed": 3}"#).is_err());
    }
}
