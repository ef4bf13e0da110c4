//! Experiment specs, training (full precision and quantization-aware) and
//! generalization-gap reports.

use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{self, BlobConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{loss_for, NetEvaluator};
use crate::model::{ArchSpec, ModelState};
use crate::quant::{self, QuantSpec};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Weight precision: full precision or a signed integer bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Int(u32),
    Fp,
}

impl Precision {
    pub fn bits(&self) -> Option<u32> {
        match self {
            Precision::Fp => None,
            Precision::Int(b) => Some(*b),
        }
    }

    /// Sort key: more bits is larger, full precision largest.
    pub fn rank(&self) -> u32 {
        self.bits().unwrap_or(u32::MAX)
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Fp => write!(f, "fp"),
            Precision::Int(b) => write!(f, "{b}"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp" | "fp32" | "fp64" | "32" => Ok(Precision::Fp),
            other => {
                let b: u32 = other
                    .trim_start_matches("int")
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown precision `{s}`")))?;
                QuantSpec::new(b, 1.0).map_err(|_| Error::Config(format!("unsupported bit width {b}")))?;
                Ok(Precision::Int(b))
            }
        }
    }
}

impl Serialize for Precision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Precision::Fp => s.serialize_str("fp"),
            Precision::Int(b) => s.serialize_u32(*b),
        }
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u32),
            Str(String),
        }
        let s = match Repr::deserialize(d)? {
            Repr::Int(b) => b.to_string(),
            Repr::Str(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    /// Learning-rate choices of the hyperparameter grid, largest first.
    pub fn lr_choices(&self) -> [f64; 3] {
        match self {
            OptimizerKind::SgdMomentum => [0.1, 0.05, 0.01],
            OptimizerKind::Adam | OptimizerKind::Rmsprop => [0.001, 0.0005, 0.0001],
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs(BlobConfig),
    TwoMoons {
        n: usize,
        #[serde(default)]
        noise: f64,
    },
    LinearRegression {
        n: usize,
        dim: usize,
        #[serde(default)]
        noise: f64,
    },
    WaveRegression {
        n: usize,
        #[serde(default)]
        noise: f64,
    },
    /// A tensor container with `x` and `y` (labels or targets) entries.
    Container {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Fraction of examples in the training split.
    #[serde(default = "default_split")]
    pub split: f64,
    /// Seeds generation and the train/test split.
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> f64 {
    0.8
}

impl DataSpec {
    pub fn blobs(cfg: BlobConfig, seed: u64) -> Self {
        Self {
            source: DataSource::Blobs(cfg),
            split: default_split(),
            seed,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let s = derive_seed(self.seed, 0);
        match &self.source {
            DataSource::Blobs(cfg) => data::blobs(cfg, s),
            DataSource::TwoMoons { n, noise } => data::two_moons(*n, *noise, s),
            DataSource::LinearRegression { n, dim, noise } => Ok(data::linear_regression(*n, *dim, *noise, s)?.0),
            DataSource::WaveRegression { n, noise } => data::wave_regression(*n, *noise, s),
            DataSource::Container { path, classes } => Dataset::load(path, *classes),
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.generate()?.split(self.split, derive_seed(self.seed, 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub arch: ArchSpec,
    pub bits: Precision,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    /// `(epoch, factor)`: from 0-based epoch `epoch` on, the rate is multiplied by `factor`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub data: DataSpec,
    pub batch_size: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut prev = None;
        for &(e, f) in &self.lr_schedule {
            if prev.is_some_and(|p| e <= p) {
                return Err(Error::Config("lr_schedule epochs must be strictly increasing".into()));
            }
            if e >= self.epochs {
                return Err(Error::Config(format!(
                    "lr_schedule epoch {e} not below epoch count {}",
                    self.epochs
                )));
            }
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("lr_schedule factor must be positive, got {f}")));
            }
            prev = Some(e);
        }
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", self.data.split)));
        }
        Ok(())
    }

    /// Learning rate used in 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }

    /// The 30-epoch schedule with two tenfold drops.
    pub fn default_schedule() -> Vec<(usize, f64)> {
        vec![(10, 0.1), (20, 0.1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Training loss before any update, then after each epoch.
    pub losses: Vec<f64>,
    /// Effective learning rate of each epoch.
    pub lrs: Vec<f64>,
    /// Index into `losses` of the selected state (0 = initialization).
    pub best_epoch: usize,
}

/// First and second moments per parameter slot.
struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const RMS_DECAY: f64 = 0.99;
const OPT_EPS: f64 = 1e-8;
const MIN_STEP: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        Self {
            kind,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn tick(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64], lr: f64) {
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for i in 0..p.len() {
                    m[i] = MOMENTUM * m[i] + g[i];
                    p[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + OPT_EPS);
                }
            }
            OptimizerKind::Rmsprop => {
                for i in 0..p.len() {
                    v[i] = RMS_DECAY * v[i] + (1.0 - RMS_DECAY) * g[i] * g[i];
                    p[i] -= lr * g[i] / (v[i].sqrt() + OPT_EPS);
                }
            }
        }
    }
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

fn train_loss(model: &ModelState, data: &Dataset) -> Result<f64> {
    Ok(NetEvaluator::new(model, data)?.evaluate(&model.effective_weights(crate::model::Which::Current))?.0)
}

/// Train on `train`. Quantized specs fake-quantize every weight tensor in the
/// forward pass and learn the step sizes through the straight-through rule.
/// Returns the state with the lowest full training loss seen at an epoch
/// boundary (initialization included).
pub fn train(spec: &ExperimentSpec, train: &Dataset) -> Result<(ModelState, TrainTrace)> {
    spec.validate()?;
    if train.example_shape() != spec.arch.input_shape.as_slice() {
        return Err(Error::InvalidShape(format!(
            "architecture expects inputs {:?}, dataset has {:?}",
            spec.arch.input_shape,
            train.example_shape()
        )));
    }
    let mut model = ModelState::new(&spec.arch, spec.seed)?;
    if let Some(b) = spec.bits.bits() {
        model.attach_quantizers(b)?;
    }
    let net = model.network(Some(loss_for(train)));
    let mut graph = net.graph.clone();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let layers: Vec<(String, String)> = model.layers().iter().map(|l| (l.name.clone(), l.weight.clone())).collect();
    let mut sizes: Vec<usize> = model.params().values().map(Tensor::len).collect();
    if model.is_quantized() {
        sizes.extend(std::iter::repeat_n(1, layers.len()));
    }
    let mut opt = Optimizer::new(spec.optimizer, &sizes);

    let first = train_loss(&model, train)?;
    if !first.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: first });
    }
    let mut trace = TrainTrace {
        losses: vec![first],
        lrs: Vec::with_capacity(spec.epochs),
        best_epoch: 0,
    };
    let mut best = model.clone();
    let shuffle_seed = derive_seed(spec.seed, 0x7261_696e);

    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        trace.lrs.push(lr);
        let mut rng = rng_for(shuffle_seed, epoch as u64);
        for batch in train.batches(spec.batch_size, &mut rng) {
            let mut bind: std::collections::HashMap<String, Tensor> =
                model.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            if let Some(q) = model.quant() {
                for (layer, weight) in &layers {
                    let t = bind.get_mut(weight).expect("weight");
                    let fq = quant::fake_quantize(t.data(), &q[layer].spec);
                    t.data_mut().copy_from_slice(&fq);
                }
            }
            let part = train.subset(&batch)?;
            bind.insert("x".into(), part.x);
            bind.insert("y".into(), part.y);
            let loss = graph.forward(&bind).map_err(|e| diverged(e, epoch + 1))?.data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, loss });
            }
            let grads = graph.backward(&Tensor::scalar(1.0)).map_err(|e| diverged(e, epoch + 1))?;
            opt.tick();
            let mut step_grads = Vec::new();
            for (slot, name) in names.iter().enumerate() {
                let mut g = grads[name].data().to_vec();
                let layer = layers.iter().find(|(_, w)| w == name).map(|(l, _)| l);
                if let (Some(layer), Some(q)) = (layer, model.quant()) {
                    let (gw, gs) = quant::ste_grads(&g, model.params()[name].data(), &q[layer].spec);
                    g = gw;
                    step_grads.push(gs);
                }
                let p = model.param_mut(name).expect("param").data_mut();
                if spec.weight_decay > 0.0 {
                    for (gi, pi) in g.iter_mut().zip(p.iter()) {
                        *gi += spec.weight_decay * pi;
                    }
                }
                opt.update(slot, p, &g, lr);
            }
            for (k, (layer, _)) in layers.iter().enumerate().take(step_grads.len()) {
                let mut s = [model.quant().expect("quantized")[layer].spec.step];
                opt.update(names.len() + k, &mut s, &[step_grads[k]], lr);
                model.set_step(layer, s[0].max(MIN_STEP))?;
            }
        }
        let l = train_loss(&model, train).map_err(|e| diverged(e, epoch + 1))?;
        if !l.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, loss: l });
        }
        trace.losses.push(l);
        if l < trace.losses[trace.best_epoch] {
            trace.best_epoch = epoch + 1;
            best = model.clone();
        }
    }
    Ok((best, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    /// Selected epoch, when the report follows training.
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ExperimentSpec>,
}

pub fn measure_gap(model: &ModelState, train: &Dataset, test: &Dataset) -> Result<GapReport> {
    let w = model.effective_weights(crate::model::Which::Current);
    let (train_loss, train_acc) = NetEvaluator::new(model, train)?.evaluate(&w)?;
    let (test_loss, test_acc) = NetEvaluator::new(model, test)?.evaluate(&w)?;
    Ok(GapReport {
        train_acc,
        test_acc,
        train_loss,
        test_loss,
        gap: test_loss - train_loss,
        best_epoch: None,
        spec: None,
    })
}

pub struct RunOutput {
    pub model: ModelState,
    pub trace: TrainTrace,
    pub report: GapReport,
    pub train: Dataset,
    pub test: Dataset,
}

/// Load the data, train and measure the gap.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutput> {
    let (train_set, test_set) = spec.data.load()?;
    let (model, trace) = train(spec, &train_set)?;
    let mut report = measure_gap(&model, &train_set, &test_set)?;
    report.best_epoch = Some(trace.best_epoch);
    report.spec = Some(spec.clone());
    Ok(RunOutput {
        model,
        trace,
        report,
        train: train_set,
        test: test_set,
    })
}

/// Per-layer learned step sizes in layer order.
pub fn bin_width_report(model: &ModelState) -> Result<Vec<(String, f64)>> {
    let q = model.quant().filter(|q| !q.is_empty()).ok_or(Error::NotQuantized)?;
    Ok(model.layers().iter().map(|l| (l.name.clone(), q[&l.name].spec.step)).collect())
}

pub fn write_bin_width_csv<W: std::io::Write>(out: W, rows: &[(String, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["layer", "step"])?;
    for (l, s) in rows {
        wtr.write_record([l.clone(), s.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons_spec(epochs: usize) -> ExperimentSpec {
        ExperimentSpec {
            arch: ArchSpec::mlp(2, 8, 1, 2),
            bits: Precision::Fp,
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.05,
            weight_decay: 0.0,
            epochs,
            lr_schedule: vec![],
            seed: 3,
            data: DataSpec {
                source: DataSource::TwoMoons { n: 100, noise: 0.1 },
                split: 0.8,
                seed: 1,
            },
            batch_size: 16,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = moons_spec(0);
        let (tr, _) = spec.data.load().unwrap();
        let (m, trace) = train(&spec, &tr).unwrap();
        assert_eq!(trace.best_epoch, 0);
        assert_eq!(m.params(), m.init_snapshot());
        assert_eq!(m, ModelState::new(&spec.arch, spec.seed).unwrap());
    }

    #[test]
    fn schedule_bookkeeping() {
        let mut spec = moons_spec(4);
        spec.lr = 0.1;
        spec.lr_schedule = vec![(2, 0.1)];
        let (tr, _) = spec.data.load().unwrap();
        let (_, trace) = train(&spec, &tr).unwrap();
        assert_eq!(trace.lrs, vec![0.1, 0.1, 0.1 * 0.1, 0.1 * 0.1]);
        assert_eq!(trace.losses.len(), 5);
    }

    #[test]
    fn schedule_validation() {
        let mut spec = moons_spec(4);
        spec.lr_schedule = vec![(2, 0.1), (2, 0.1)];
        assert!(spec.validate().is_err());
        spec.lr_schedule = vec![(4, 0.1)];
        assert!(spec.validate().is_err());
        spec.lr_schedule = vec![];
        spec.lr = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn best_epoch_is_minimum() {
        let spec = moons_spec(5);
        let (tr, _) = spec.data.load().unwrap();
        let (m, trace) = train(&spec, &tr).unwrap();
        let min = trace.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(trace.losses[trace.best_epoch], min);
        assert_eq!(train_loss(&m, &tr).unwrap(), min);
    }

    #[test]
    fn divergence_is_reported() {
        let mut spec = moons_spec(30);
        spec.lr = 1e6;
        spec.optimizer = OptimizerKind::SgdMomentum;
        let (tr, _) = spec.data.load().unwrap();
        assert!(matches!(train(&spec, &tr), Err(Error::Diverged { .. })));
    }

    #[test]
    fn gap_of_identical_splits_is_zero() {
        let spec = moons_spec(1);
        let (tr, _) = spec.data.load().unwrap();
        let (m, _) = train(&spec, &tr).unwrap();
        let g = measure_gap(&m, &tr, &tr).unwrap();
        assert_eq!(g.gap, 0.0);
        assert_eq!(g.gap, g.test_loss - g.train_loss);
    }

    #[test]
    fn precision_parsing() {
        assert_eq!("fp".parse::<Precision>().unwrap(), Precision::Fp);
        assert_eq!("int4".parse::<Precision>().unwrap(), Precision::Int(4));
        assert!("1".parse::<Precision>().is_err());
        let v: Precision = serde_json::from_str("8").unwrap();
        assert_eq!(v, Precision::Int(8));
        assert_eq!(serde_json::to_string(&Precision::Fp).unwrap(), "\"fp\"");
    }

    #[test]
    fn quantized_training_learns_steps() {
        let mut spec = moons_spec(3);
        spec.bits = Precision::Int(2);
        let (tr, _) = spec.data.load().unwrap();
        let (m, _) = train(&spec, &tr).unwrap();
        let rows = bin_width_report(&m).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|(_, s)| *s > 0.0));
        let mut buf = Vec::new();
        write_bin_width_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("layer,step\n"));
    }

    #[test]
    fn full_precision_has_no_bin_widths() {
        let m = ModelState::new(&ArchSpec::mlp(2, 4, 1, 1), 0).unwrap();
        assert!(matches!(bin_width_report(&m), Err(Error::NotQuantized)));
    }
}
