//! The reference desk-scale experiment: a two-block NiN on 8x8 single-channel
//! blob images with 20% label noise, 80 training and 240 test examples.

use crate::data::BlobConfig;
use crate::grid::{Axis, GridConfig};
use crate::model::ArchSpec;
use crate::train::{DataSource, DataSpec, ExperimentSpec, OptimizerKind, Precision};

pub const EPOCHS: usize = 60;

pub fn data() -> DataSpec {
    DataSpec {
        split: 0.25,
        ..DataSpec::blobs(
            BlobConfig {
                n: 320,
                size: 8,
                channels: 1,
                noise: 0.1,
                label_noise: 0.2,
            },
            0,
        )
    }
}

pub fn arch() -> ArchSpec {
    ArchSpec::nin([1, 8, 8], 2, 2, 1, 16)
}

pub fn spec(bits: Precision, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        arch: arch(),
        bits,
        optimizer: OptimizerKind::Adam,
        lr: 0.003,
        weight_decay: 0.0,
        epochs: EPOCHS,
        lr_schedule: vec![(EPOCHS / 3, 0.1), (2 * EPOCHS / 3, 0.1)],
        seed,
        data: data(),
        batch_size: 16,
    }
}

/// Eight cells per precision: optimizer x learning rate x weight decay.
pub fn grid(precisions: Vec<Precision>, base_seed: u64) -> GridConfig {
    GridConfig {
        base: spec(Precision::Fp, 0),
        precisions,
        axes: vec![
            Axis::Optimizer(vec![OptimizerKind::Adam, OptimizerKind::Rmsprop]),
            Axis::Lr(vec![0.003, 0.002]),
            Axis::WeightDecay(vec![0.0, 1e-4]),
        ],
        base_seed,
    }
}

/// A 2-16-1 MLP on a smooth two-dimensional regression target.
pub fn regression_spec(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        arch: ArchSpec::mlp(2, 16, 1, 1),
        bits: Precision::Fp,
        optimizer: OptimizerKind::Adam,
        lr: 0.01,
        weight_decay: 0.0,
        epochs: 100,
        lr_schedule: vec![(50, 0.1)],
        seed,
        data: DataSpec {
            source: DataSource::WaveRegression { n: 256, noise: 0.05 },
            split: 0.5,
            seed: 0,
        },
        batch_size: 32,
    }
}
