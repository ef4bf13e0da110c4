//! `qlens` command-line runner.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qlens::checkpoint::{self, Container};
use qlens::corrupt::{self, CorruptionSpec};
use qlens::data::Dataset;
use qlens::eval::NetEvaluator;
use qlens::flatness;
use qlens::grid;
use qlens::landscape;
use qlens::model::{ModelState, Which};
use qlens::noise;
use qlens::train;
use qlens::{Error, Result};
use serde_json::{json, Value};

use config::Config;

/// Worker threads for parallel sections.
const WORKERS_ENV: &str = "QLENS_WORKERS";

#[derive(Parser)]
#[command(name = "qlens", version, about = "Quantization-as-regularizer experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "qlens-out")]
    out: PathBuf,
    /// Override any configuration key, e.g. `--set flatness.draws=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    weight_decay: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Args, Clone)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint; the model is trained from the configuration when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save its checkpoint and trace.
    Train(Common),
    /// Generalization gap of a trained model.
    Gap(WithModel),
    /// Run a hyperparameter grid at several precisions.
    Grid(Common),
    /// PAC-Bayes and sharpness flatness measures.
    Flatness(WithModel),
    /// Two-dimensional loss-surface slice.
    Landscape(WithModel),
    /// Generalization gap under image corruptions.
    CorruptEval {
        #[command(flatten)]
        model: WithModel,
        /// Also write every corrupted test set as a tensor container.
        #[arg(long)]
        emit: bool,
    },
    /// Monte-Carlo check of the quantization-noise regularizer identity.
    NoiseCheck(WithModel),
    /// Learned step size of every layer of a quantized checkpoint.
    QuantizeReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let named = [
            ("bits", &self.bits),
            ("optimizer", &self.optimizer),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("batch_size", &self.batch_size),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<Config> {
        let cfg = Config::load(self.config.as_deref(), &self.overrides()?)?;
        fs::create_dir_all(&self.out)?;
        Ok(cfg)
    }
}

fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

struct Loaded {
    model: ModelState,
    train: Dataset,
    test: Dataset,
}

/// Load the checkpoint if given, otherwise train (and save) one.
fn obtain_model(cfg: &Config, wm: &WithModel) -> Result<Loaded> {
    let (train_set, test_set) = cfg.experiment.data.load()?;
    let model = match &wm.checkpoint {
        Some(path) => checkpoint::load_model(&cfg.experiment.arch, path)?,
        None => {
            let (model, trace) = train::train(&cfg.experiment, &train_set)?;
            checkpoint::save_model(&model, wm.common.out.join("model.qlns"))?;
            write_json(&wm.common.out.join("trace.json"), &trace)?;
            model
        }
    };
    Ok(Loaded {
        model,
        train: train_set,
        test: test_set,
    })
}

fn cmd_train(c: &Common) -> Result<Value> {
    let cfg = c.load()?;
    let out = train::run(&cfg.experiment)?;
    checkpoint::save_model(&out.model, c.out.join("model.qlns"))?;
    let record = json!({ "report": out.report, "trace": out.trace });
    write_json(&c.out.join("train.json"), &record)?;
    Ok(serde_json::to_value(&out.report)?)
}

fn cmd_gap(wm: &WithModel) -> Result<Value> {
    let cfg = wm.common.load()?;
    let l = obtain_model(&cfg, wm)?;
    let mut report = train::measure_gap(&l.model, &l.train, &l.test)?;
    report.spec = Some(cfg.experiment.clone());
    write_json(&wm.common.out.join("gap.json"), &report)?;
    Ok(serde_json::to_value(&report)?)
}

fn cmd_grid(c: &Common) -> Result<Value> {
    let cfg = c.load()?;
    let result = grid::run_grid(&cfg.grid_config(), workers()?)?;
    result.write_cells_csv(create(&c.out.join("grid_cells.csv"))?)?;
    result.write_summary_csv(create(&c.out.join("grid_summary.csv"))?)?;
    write_json(&c.out.join("grid.json"), &result)?;
    Ok(json!({ "cells": result.cells.len(), "summary": result.summary }))
}

fn cmd_flatness(wm: &WithModel) -> Result<Value> {
    let cfg = wm.common.load()?;
    let l = obtain_model(&cfg, wm)?;
    let report = flatness::full_report(&l.model, &l.train, &cfg.flatness.to_config())?;
    write_json(&wm.common.out.join("flatness.json"), &report)?;
    let arch = &cfg.experiment.arch;
    let model_name = format!(
        "{}-{}x{}",
        serde_json::to_value(arch.kind)?.as_str().unwrap_or_default(),
        arch.depth_multiplier,
        arch.width_multiplier
    );
    let dataset = serde_json::to_value(&cfg.experiment.data)?["kind"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let row = (dataset, model_name, cfg.experiment.bits.to_string(), report.clone());
    flatness::write_table_csv(create(&wm.common.out.join("flatness.csv"))?, &[row])?;
    Ok(json!({ "measures": report.reported(), "m": report.m, "delta_conf": report.delta_conf }))
}

fn cmd_landscape(wm: &WithModel) -> Result<Value> {
    let cfg = wm.common.load()?;
    let l = obtain_model(&cfg, wm)?;
    let s = &cfg.landscape;
    let g = landscape::landscape(&l.model, &l.train, s.seed, s.half_range, s.steps)?;
    g.write_csv(create(&wm.common.out.join("landscape.csv"))?)?;
    write_json(&wm.common.out.join("landscape.json"), &g.sidecar())?;
    Ok(g.sidecar())
}

fn cmd_corrupt(wm: &WithModel, emit: bool) -> Result<Value> {
    let cfg = wm.common.load()?;
    let l = obtain_model(&cfg, wm)?;
    let s = &cfg.corrupt;
    let w = l.model.effective_weights(Which::Current);
    let clean = train::measure_gap(&l.model, &l.train, &l.test)?;
    let train_loss = NetEvaluator::new(&l.model, &l.train)?.evaluate(&w)?.0;
    if emit {
        fs::create_dir_all(wm.common.out.join("corrupted"))?;
    }
    let mut rows = Vec::new();
    for &kind in &s.kinds {
        for &severity in &s.severities {
            let spec = CorruptionSpec::new(kind, severity, s.seed)?;
            let x = corrupt::apply_batch(&l.test.x, &spec)?;
            let test = l.test.with_inputs(x)?;
            let (loss, acc) = NetEvaluator::new(&l.model, &test)?.evaluate(&w)?;
            if emit {
                let c = Container {
                    sections: vec![test.to_section()],
                };
                c.save(wm.common.out.join("corrupted").join(format!("{}_{severity}.qlns", kind.name())))?;
            }
            rows.push(json!({
                "kind": kind,
                "severity": severity,
                "level": spec.level(),
                "test_loss": loss,
                "test_acc": acc,
                "gap": loss - train_loss,
            }));
        }
    }
    let mut wtr = csv::Writer::from_writer(create(&wm.common.out.join("corrupt.csv"))?);
    wtr.write_record(["kind", "severity", "level", "test_loss", "test_acc", "gap"])?;
    for r in &rows {
        wtr.write_record([
            r["kind"].as_str().unwrap_or_default().to_string(),
            r["severity"].to_string(),
            r["level"].to_string(),
            r["test_loss"].to_string(),
            r["test_acc"].to_string().replace("null", ""),
            r["gap"].to_string(),
        ])?;
    }
    wtr.flush()?;
    let record = json!({ "clean": clean, "seed": s.seed, "cells": rows });
    write_json(&wm.common.out.join("corrupt.json"), &record)?;
    Ok(json!({ "clean_gap": clean.gap, "cells": rows.len() }))
}

fn cmd_noise(wm: &WithModel) -> Result<Value> {
    let cfg = wm.common.load()?;
    let l = obtain_model(&cfg, wm)?;
    let s = &cfg.noise;
    let w = l.model.effective_weights(Which::Current);
    let w_inf = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let delta = s.delta.unwrap_or(s.delta_ratio * w_inf);
    let check = noise::identity_check(&l.model, &l.train, delta, s.draws, s.seed)?;
    let dominance = noise::dominance_check(&NetEvaluator::new(&l.model, &l.train)?, delta, s.draws, s.seed)?;
    let record = json!({ "identity": check, "relative_gap": check.relative_gap(), "dominance": dominance });
    write_json(&wm.common.out.join("noise_check.json"), &record)?;
    Ok(record)
}

fn cmd_quantize_report(c: &Common, path: &Path) -> Result<Value> {
    let cfg = c.load()?;
    let model = checkpoint::load_model(&cfg.experiment.arch, path)?;
    let rows = train::bin_width_report(&model)?;
    train::write_bin_width_csv(create(&c.out.join("bin_widths.csv"))?, &rows)?;
    Ok(json!({ "layers": rows.iter().map(|(l, s)| json!({ "layer": l, "step": s })).collect::<Vec<_>>() }))
}

fn run(cli: &Cli) -> Result<Value> {
    let n = workers()?;
    // A second initialization attempt only happens in tests; ignore it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Gap(wm) => cmd_gap(wm),
        Command::Grid(c) => cmd_grid(c),
        Command::Flatness(wm) => cmd_flatness(wm),
        Command::Landscape(wm) => cmd_landscape(wm),
        Command::CorruptEval { model, emit } => cmd_corrupt(model, *emit),
        Command::NoiseCheck(wm) => cmd_noise(wm),
        Command::QuantizeReport { common, checkpoint } => cmd_quantize_report(common, checkpoint),
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let err = json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(&cli) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("serializable");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
