//! Hyperparameter grids: every combination of the axis values, trained at
//! every precision, with per-precision aggregates.
//!
//! Cells enumerate the axes in row-major order (last axis fastest). The
//! precision list is an outer loop: all precisions of one cell share the
//! cell's derived seed, so precisions are compared on paired runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::train::{self, ExperimentSpec, GapReport, OptimizerKind, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "values", rename_all = "snake_case")]
pub enum Axis {
    Optimizer(Vec<OptimizerKind>),
    /// Index into the optimizer's learning-rate choices.
    LrRank(Vec<usize>),
    Lr(Vec<f64>),
    WeightDecay(Vec<f64>),
    BatchSize(Vec<usize>),
    DepthMultiplier(Vec<usize>),
    WidthMultiplier(Vec<usize>),
    Epochs(Vec<usize>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Optimizer(_) => "optimizer",
            Axis::LrRank(_) => "lr_rank",
            Axis::Lr(_) => "lr",
            Axis::WeightDecay(_) => "weight_decay",
            Axis::BatchSize(_) => "batch_size",
            Axis::DepthMultiplier(_) => "depth_multiplier",
            Axis::WidthMultiplier(_) => "width_multiplier",
            Axis::Epochs(_) => "epochs",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Optimizer(v) => v.len(),
            Axis::LrRank(v) | Axis::BatchSize(v) | Axis::DepthMultiplier(v) | Axis::WidthMultiplier(v) | Axis::Epochs(v) => {
                v.len()
            }
            Axis::Lr(v) | Axis::WeightDecay(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            Axis::Optimizer(v) => serde_json::to_value(v[i])
                .ok()
                .and_then(|s| s.as_str().map(str::to_string))
                .unwrap_or_default(),
            Axis::LrRank(v) | Axis::BatchSize(v) | Axis::DepthMultiplier(v) | Axis::WidthMultiplier(v) | Axis::Epochs(v) => {
                v[i].to_string()
            }
            Axis::Lr(v) | Axis::WeightDecay(v) => v[i].to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub base: ExperimentSpec,
    pub precisions: Vec<Precision>,
    #[serde(default)]
    pub axes: Vec<Axis>,
    pub base_seed: u64,
}

impl GridConfig {
    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    /// Axis value indices of cell `index`, last axis fastest.
    pub fn coordinates(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            out[k] = index % a.len();
            index /= a.len();
        }
        out
    }

    /// The experiment of one (cell, precision) pair.
    pub fn cell_spec(&self, index: usize, precision: Precision) -> Result<ExperimentSpec> {
        let mut spec = self.base.clone();
        spec.bits = precision;
        spec.seed = derive_seed(self.base_seed, index as u64);
        let mut rank = None;
        for (a, i) in self.axes.iter().zip(self.coordinates(index)) {
            match a {
                Axis::Optimizer(v) => spec.optimizer = v[i],
                Axis::LrRank(v) => rank = Some(v[i]),
                Axis::Lr(v) => spec.lr = v[i],
                Axis::WeightDecay(v) => spec.weight_decay = v[i],
                Axis::BatchSize(v) => spec.batch_size = v[i],
                Axis::DepthMultiplier(v) => spec.arch.depth_multiplier = v[i],
                Axis::WidthMultiplier(v) => spec.arch.width_multiplier = v[i],
                Axis::Epochs(v) => spec.epochs = v[i],
            }
        }
        if let Some(r) = rank {
            let choices = spec.optimizer.lr_choices();
            spec.lr = *choices
                .get(r)
                .ok_or_else(|| Error::Config(format!("lr_rank {r} outside 0..{}", choices.len())))?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precisions.is_empty() {
            return Err(Error::Config("grid needs at least one precision".into()));
        }
        if let Some(a) = self.axes.iter().find(|a| a.is_empty()) {
            return Err(Error::Config(format!("grid axis `{}` has no values", a.name())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub precision: Precision,
    /// Axis values of the cell, as labels.
    pub values: Vec<String>,
    pub seed: u64,
    pub report: Option<GapReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub precision: Precision,
    pub cells: usize,
    pub failed: usize,
    pub mean_train_loss: f64,
    pub mean_test_loss: f64,
    pub mean_gap: f64,
    pub mean_train_acc: Option<f64>,
    pub mean_test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub axis_names: Vec<String>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<PrecisionSummary>,
}

/// Run every (cell, precision) pair on at most `workers` threads. Failed
/// cells are recorded and excluded from the means.
pub fn run_grid(cfg: &GridConfig, workers: usize) -> Result<GridResult> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.base.data.load()?;
    let jobs: Vec<(usize, Precision)> = (0..cfg.cell_count())
        .flat_map(|c| cfg.precisions.iter().map(move |&p| (c, p)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let run_one = |&(cell, precision): &(usize, Precision)| {
        let coords = cfg.coordinates(cell);
        let values = cfg.axes.iter().zip(&coords).map(|(a, &i)| a.label(i)).collect();
        let outcome = cfg.cell_spec(cell, precision).and_then(|spec| {
            let (model, trace) = train::train(&spec, &train_set)?;
            let mut report = train::measure_gap(&model, &train_set, &test_set)?;
            report.best_epoch = Some(trace.best_epoch);
            report.spec = Some(spec);
            Ok(report)
        });
        let (report, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CellResult {
            cell,
            precision,
            values,
            seed: derive_seed(cfg.base_seed, cell as u64),
            report,
            error,
        }
    };
    let cells: Vec<CellResult> = pool.install(|| jobs.par_iter().map(run_one).collect());
    let summary = cfg.precisions.iter().map(|&p| summarize(&cells, p)).collect();
    Ok(GridResult {
        axis_names: cfg.axes.iter().map(|a| a.name().to_string()).collect(),
        cells,
        summary,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(cells: &[CellResult], precision: Precision) -> PrecisionSummary {
    let mine: Vec<&CellResult> = cells.iter().filter(|c| c.precision == precision).collect();
    let ok: Vec<&GapReport> = mine.iter().filter_map(|c| c.report.as_ref()).collect();
    let acc = |f: fn(&GapReport) -> Option<f64>| {
        let v: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
    };
    PrecisionSummary {
        precision,
        cells: mine.len(),
        failed: mine.len() - ok.len(),
        mean_train_loss: mean(ok.iter().map(|r| r.train_loss)),
        mean_test_loss: mean(ok.iter().map(|r| r.test_loss)),
        mean_gap: mean(ok.iter().map(|r| r.gap)),
        mean_train_acc: acc(|r| r.train_acc),
        mean_test_acc: acc(|r| r.test_acc),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl GridResult {
    pub fn write_cells_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["cell".to_string(), "precision".to_string()];
        header.extend(self.axis_names.iter().cloned());
        header.extend(
            ["seed", "train_loss", "test_loss", "gap", "train_acc", "test_acc", "best_epoch", "error"].map(String::from),
        );
        wtr.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.cell.to_string(), c.precision.to_string()];
            rec.extend(c.values.iter().cloned());
            rec.push(c.seed.to_string());
            match &c.report {
                Some(r) => rec.extend([
                    r.train_loss.to_string(),
                    r.test_loss.to_string(),
                    r.gap.to_string(),
                    opt(r.train_acc),
                    opt(r.test_acc),
                    r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                    String::new(),
                ]),
                None => {
                    rec.extend(std::iter::repeat_n(String::new(), 6));
                    rec.push(c.error.clone().unwrap_or_default());
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "precision",
            "cells",
            "failed",
            "mean_train_loss",
            "mean_test_loss",
            "mean_gap",
            "mean_train_acc",
            "mean_test_acc",
        ])?;
        for s in &self.summary {
            wtr.write_record([
                s.precision.to_string(),
                s.cells.to_string(),
                s.failed.to_string(),
                s.mean_train_loss.to_string(),
                s.mean_test_loss.to_string(),
                s.mean_gap.to_string(),
                opt(s.mean_train_acc),
                opt(s.mean_test_acc),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
