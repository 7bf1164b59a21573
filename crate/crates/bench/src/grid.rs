//! Exhaustive search over shared last-layer hyperparameters.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssdgp::graph::ModelDescription;
use ssdgp::{DgpModel, ParamSource};

use crate::config::{DataSource, ExperimentConfig, SolverKind};
use crate::error::{BenchError, Result};
use crate::experiment::{run_trial, ExperimentReport, Stat};
use crate::output::fmt_opt;

/// Candidate values. Every node in the deepest layer gets the same `(lengthscale, magnitude)`;
/// `fixed_magnitude`, when given, replaces the fixed magnitudes of all other nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lengthscale: Vec<f64>,
    pub magnitude: Vec<f64>,
    #[serde(default)]
    pub fixed_magnitude: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub lengthscale: f64,
    pub magnitude: f64,
    pub fixed_magnitude: Option<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscale.is_empty() || self.magnitude.is_empty() {
            return Err(BenchError::Config("grid needs at least one lengthscale and one magnitude".into()));
        }
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if !self.lengthscale.iter().all(positive) || !self.magnitude.iter().all(positive) || !self.fixed_magnitude.iter().all(positive) {
            return Err(BenchError::Config("grid values must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let fixed: Vec<Option<f64>> = if self.fixed_magnitude.is_empty() {
            vec![None]
        } else {
            self.fixed_magnitude.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &lengthscale in &self.lengthscale {
            for &magnitude in &self.magnitude {
                for &fixed_magnitude in &fixed {
                    out.push(GridCell { lengthscale, magnitude, fixed_magnitude });
                }
            }
        }
        out
    }
}

/// Model with the cell's values substituted.
pub fn apply_cell(desc: &ModelDescription, cell: &GridCell) -> ModelDescription {
    let last = desc.nodes.iter().map(|n| n.id.layer).max().unwrap_or(1);
    let mut out = desc.clone();
    for node in &mut out.nodes {
        if node.id.layer == last {
            node.lengthscale = ParamSource::fixed(cell.lengthscale);
            node.magnitude = ParamSource::fixed(cell.magnitude);
        } else if let (ParamSource::Fixed { .. }, Some(v)) = (node.magnitude, cell.fixed_magnitude) {
            node.magnitude = ParamSource::fixed(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: GridCell,
    /// Mean RMSE when the data carry the truth, mean NLPD otherwise.
    pub score: Option<f64>,
    pub rmse: Option<Stat>,
    pub nlpd: Option<Stat>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the best cell.
    pub best: Option<usize>,
}

impl GridReport {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|i| &self.rows[i])
    }
}

fn cell_order(a: &GridRow, b: &GridRow) -> Ordering {
    let key = |r: &GridRow| r.score.unwrap_or(f64::INFINITY);
    key(a)
        .total_cmp(&key(b))
        .then(a.cell.lengthscale.total_cmp(&b.cell.lengthscale))
        .then(a.cell.magnitude.total_cmp(&b.cell.magnitude))
        .then(a.cell.fixed_magnitude.unwrap_or(0.0).total_cmp(&b.cell.fixed_magnitude.unwrap_or(0.0)))
}

pub fn grid_search(config: &ExperimentConfig, grid: &GridSpec) -> Result<GridReport> {
    config.validate()?;
    grid.validate()?;
    if config.solver == SolverKind::GpMle {
        return Err(BenchError::Config("gp-mle fits its own hyperparameters; grid search does not apply".into()));
    }
    let desc = config.model_description()?.expect("validated config has a model");
    let use_rmse = !matches!(config.data, DataSource::File { .. });
    let cells = grid.cells();
    // a cell whose model cannot be built counts as failed in every trial
    let models: Vec<Option<DgpModel>> = cells.iter().map(|c| DgpModel::new(apply_cell(&desc, c).nodes).ok()).collect();
    let rows: Vec<GridRow> = cells
        .par_iter()
        .zip(models.par_iter())
        .map(|(cell, model)| {
            let Some(model) = model else {
                return GridRow { cell: *cell, score: None, rmse: None, nlpd: None, failures: config.trials };
            };
            let trials = (0..config.trials).map(|i| run_trial(config, Some(model), i)).collect();
            let report = ExperimentReport::from_trials(config.solver, trials);
            let metric = if use_rmse { report.summary.rmse } else { report.summary.nlpd };
            GridRow {
                cell: *cell,
                score: metric.map(|s| s.mean).filter(|v| v.is_finite()),
                rmse: report.summary.rmse,
                nlpd: report.summary.nlpd,
                failures: report.summary.failures,
            }
        })
        .collect();
    let best = (0..rows.len())
        .filter(|&i| rows[i].score.is_some())
        .min_by(|&a, &b| cell_order(&rows[a], &rows[b]));
    Ok(GridReport { rows, best })
}

pub fn write_grid_csv<W: Write>(report: &GridReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "lengthscale,magnitude,fixed_magnitude,score,rmse_mean,rmse_std,nlpd_mean,nlpd_std,failures,best")?;
    for (i, r) in report.rows.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_opt(Some(r.cell.lengthscale)),
            fmt_opt(Some(r.cell.magnitude)),
            fmt_opt(r.cell.fixed_magnitude),
            fmt_opt(r.score),
            fmt_opt(r.rmse.map(|s| s.mean)),
            fmt_opt(r.rmse.map(|s| s.std)),
            fmt_opt(r.nlpd.map(|s| s.mean)),
            fmt_opt(r.nlpd.map(|s| s.std)),
            r.failures,
            u8::from(report.best == Some(i)),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelSource, OutputSpec, SolverOptions};
    use ssdgp::{DgpNode, NodeId, WrappingKind};

    fn dgp2() -> ModelDescription {
        ModelDescription {
            nodes: vec![
                DgpNode::new(
                    NodeId::new(1, 1),
                    1,
                    ParamSource::parent(NodeId::new(2, 1), WrappingKind::Exp),
                    ParamSource::fixed(1.0),
                ),
                DgpNode::new(NodeId::new(2, 1), 0, ParamSource::fixed(1.0), ParamSource::fixed(1.0)),
            ],
        }
    }

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Rectangle { samples: 40, noise_var: 0.002 },
            model: Some(ModelSource::Inline(dgp2())),
            solver: SolverKind::Ekfs,
            scheme: None,
            trials: 2,
            seed: 4,
            options: SolverOptions::default(),
            output: OutputSpec::default(),
            base_dir: Default::default(),
        }
    }

    #[test]
    fn cell_substitution() {
        let cell = GridCell { lengthscale: 0.3, magnitude: 2.0, fixed_magnitude: Some(0.7) };
        let d = apply_cell(&dgp2(), &cell);
        assert_eq!(d.nodes[1].lengthscale, ParamSource::fixed(0.3));
        assert_eq!(d.nodes[1].magnitude, ParamSource::fixed(2.0));
        assert_eq!(d.nodes[0].magnitude, ParamSource::fixed(0.7));
        assert_eq!(d.nodes[0].lengthscale, dgp2().nodes[0].lengthscale);
    }

    #[test]
    fn single_cell_grid_returns_that_cell() {
        let grid = GridSpec { lengthscale: vec![0.5], magnitude: vec![1.0], fixed_magnitude: vec![] };
        let r = grid_search(&config(), &grid).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.best, Some(0));
        assert!(r.rows[0].score.is_some());
    }

    #[test]
    fn ties_prefer_smaller_lengthscale_then_magnitude() {
        let row = |l, m, s| GridRow {
            cell: GridCell { lengthscale: l, magnitude: m, fixed_magnitude: None },
            score: s,
            rmse: None,
            nlpd: None,
            failures: 0,
        };
        let mut rows = [row(0.5, 1.0, Some(0.1)), row(0.2, 2.0, Some(0.1)), row(0.2, 1.0, Some(0.1)), row(0.01, 1.0, None)];
        rows.sort_by(cell_order);
        assert_eq!((rows[0].cell.lengthscale, rows[0].cell.magnitude), (0.2, 1.0));
        assert_eq!(rows[3].score, None);
    }

    #[test]
    fn diverging_cell_is_skipped() {
        let grid = GridSpec { lengthscale: vec![0.5], magnitude: vec![1.0], fixed_magnitude: vec![1.0, 1e300] };
        let mut cfg = config();
        cfg.solver = SolverKind::Ckfs;
        let r = grid_search(&cfg, &grid).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].failures, 2);
        assert_eq!(r.rows[1].score, None);
        assert_eq!(r.best, Some(0));
    }

    #[test]
    fn gp_baseline_rejected() {
        let mut cfg = config();
        cfg.solver = SolverKind::GpMle;
        cfg.model = None;
        let grid = GridSpec { lengthscale: vec![0.5], magnitude: vec![1.0], fixed_magnitude: vec![] };
        assert!(matches!(grid_search(&cfg, &grid), Err(BenchError::Config(_))));
    }
}
