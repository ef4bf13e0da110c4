//! Run configuration: the reference desk experiment, overlaid with a TOML
//! file, overlaid with command-line overrides.

use std::path::Path;

use qlens::corrupt::CorruptionKind;
use qlens::desk;
use qlens::flatness::{Criterion, FlatnessConfig, SearchConfig, WeightSource};
use qlens::grid::{Axis, GridConfig};
use qlens::perturb::AscentConfig;
use qlens::train::{ExperimentSpec, Precision};
use qlens::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub flatness: FlatnessSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
    #[serde(default)]
    pub corrupt: CorruptSection,
    #[serde(default)]
    pub noise: NoiseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub precisions: Vec<Precision>,
    pub axes: Vec<Axis>,
    pub base_seed: u64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = desk::grid(default_precisions(), 0);
        Self {
            precisions: g.precisions,
            axes: g.axes,
            base_seed: g.base_seed,
        }
    }
}

fn default_precisions() -> Vec<Precision> {
    vec![Precision::Fp, Precision::Int(8), Precision::Int(4), Precision::Int(2)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatnessSection {
    pub target_dev: f64,
    pub iters: usize,
    pub draws: usize,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub delta_conf: f64,
    pub criterion: Criterion,
    pub weights: WeightSource,
    pub normalize: bool,
    pub m: Option<usize>,
    pub seed: u64,
}

impl Default for FlatnessSection {
    fn default() -> Self {
        let f = FlatnessConfig::default();
        Self {
            target_dev: f.search.target_dev,
            iters: f.search.iters,
            draws: f.search.draws,
            ascent_steps: f.search.ascent.steps,
            ascent_lr: f.search.ascent.lr,
            bracket_lo: f.search.bracket_lo,
            bracket_hi: f.search.bracket_hi,
            delta_conf: f.delta_conf,
            criterion: f.search.criterion,
            weights: f.weights,
            normalize: f.normalize,
            m: f.m,
            seed: f.search.seed,
        }
    }
}

impl FlatnessSection {
    pub fn to_config(&self) -> FlatnessConfig {
        FlatnessConfig {
            search: SearchConfig {
                target_dev: self.target_dev,
                iters: self.iters,
                draws: self.draws,
                ascent: AscentConfig {
                    steps: self.ascent_steps,
                    lr: self.ascent_lr,
                },
                bracket_lo: self.bracket_lo,
                bracket_hi: self.bracket_hi,
                criterion: self.criterion,
                seed: self.seed,
                ..SearchConfig::default()
            },
            delta_conf: self.delta_conf,
            m: self.m,
            normalize: self.normalize,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandscapeSection {
    pub half_range: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            half_range: 1.0,
            steps: 21,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptSection {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seed: u64,
}

impl Default for CorruptSection {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSection {
    /// Bin width as a fraction of the largest weight magnitude.
    pub delta_ratio: f64,
    /// Absolute bin width; overrides `delta_ratio`.
    pub delta: Option<f64>,
    pub draws: usize,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            delta_ratio: 0.01,
            delta: None,
            draws: 10_000,
            seed: 0,
        }
    }
}

impl Config {
    pub fn desk() -> Self {
        Self {
            experiment: desk::spec(Precision::Fp, 0),
            grid: GridSection::default(),
            flatness: FlatnessSection::default(),
            landscape: LandscapeSection::default(),
            corrupt: CorruptSection::default(),
            noise: NoiseSection::default(),
        }
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            base: self.experiment.clone(),
            precisions: self.grid.precisions.clone(),
            axes: self.grid.axes.clone(),
            base_seed: self.grid.base_seed,
        }
    }

    /// Desk defaults, then `file`, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = Table::try_from(Self::desk()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let user: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        for (key, value) in overrides {
            set_path(&mut table, key, parse_value(value))?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}

/// Deep merge. A `data` table whose `kind` differs replaces the default
/// wholesale, so generator-specific keys do not leak across kinds.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                if k == "data" && o.get("kind").is_some_and(|kind| b.get("kind") != Some(kind)) {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A TOML literal if it parses as one, a bare string otherwise.
pub fn parse_value(s: &str) -> Value {
    format!("v = {s}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key `{key}`")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}
