use qlens::checkpoint::{load_model, model_to_container, save_model, Container};
use qlens::data::BlobConfig;
use qlens::grid::{run_grid, Axis, GridConfig};
use qlens::model::{ArchSpec, ModelState, Which};
use qlens::quant::init_step;
use qlens::train::{bin_width_report, run, DataSpec, ExperimentSpec, OptimizerKind, Precision};

fn tiny_spec(bits: Precision) -> ExperimentSpec {
    ExperimentSpec {
        arch: ArchSpec::nin([1, 6, 6], 2, 1, 1, 4),
        bits,
        optimizer: OptimizerKind::Adam,
        lr: 0.01,
        weight_decay: 1e-4,
        epochs: 3,
        lr_schedule: vec![(2, 0.5)],
        seed: 4,
        data: DataSpec::blobs(BlobConfig { n: 48, size: 6, channels: 1, noise: 0.2, label_noise: 0.1 }, 2),
        batch_size: 8,
    }
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny_spec(Precision::Int(4))).unwrap();
    let (a, b) = (dir.path().join("a.qlns"), dir.path().join("b.qlns"));
    save_model(&out.model, &a).unwrap();
    let loaded = load_model(out.model.arch(), &a).unwrap();
    save_model(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, out.model);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"QLNS");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(Container::from_bytes(&bytes).unwrap(), model_to_container(&out.model));
}

#[test]
fn training_is_reproducible() {
    for bits in [Precision::Fp, Precision::Int(2)] {
        let a = run(&tiny_spec(bits)).unwrap();
        let b = run(&tiny_spec(bits)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        assert_eq!(serde_json::to_vec(&a.report).unwrap(), serde_json::to_vec(&b.report).unwrap());
    }
}

#[test]
fn init_snapshot_is_frozen_by_training() {
    let spec = tiny_spec(Precision::Fp);
    let fresh = ModelState::new(&spec.arch, spec.seed).unwrap();
    let out = run(&spec).unwrap();
    assert_eq!(out.model.init_snapshot(), fresh.init_snapshot());
    assert_eq!(out.model.flat_l2(Which::Init), fresh.flat_l2(Which::Init));
    assert_ne!(out.model.flat_weights(Which::Current), fresh.flat_weights(Which::Current));
}

#[test]
fn fresh_bin_widths_are_initial_steps() {
    let mut model = ModelState::new(&ArchSpec::mlp(2, 8, 1, 3), 0).unwrap();
    model.attach_quantizers(3).unwrap();
    let rows = bin_width_report(&model).unwrap();
    assert_eq!(rows.len(), 2);
    for ((name, s), layer) in rows.iter().zip(model.layers()) {
        assert_eq!(name, &layer.name);
        assert_eq!(*s, init_step(model.params()[&layer.weight].data(), 3));
    }
}

#[test]
fn grid_is_independent_of_worker_count() {
    let cfg = GridConfig {
        base: tiny_spec(Precision::Fp),
        precisions: vec![Precision::Fp, Precision::Int(2)],
        axes: vec![Axis::Optimizer(vec![OptimizerKind::Adam, OptimizerKind::Rmsprop]), Axis::WeightDecay(vec![0.0, 1e-3])],
        base_seed: 9,
    };
    let csv = |workers| {
        let r = run_grid(&cfg, workers).unwrap();
        let mut cells = vec![];
        r.write_cells_csv(&mut cells).unwrap();
        let mut summary = vec![];
        r.write_summary_csv(&mut summary).unwrap();
        (r, cells, summary)
    };
    let (r1, c1, s1) = csv(1);
    let (r3, c3, s3) = csv(3);
    assert_eq!(r1, r3);
    assert_eq!(c1, c3);
    assert_eq!(s1, s3);
    assert_eq!(r1.cells.len(), 8);
    assert!(r1.cells.iter().all(|c| c.error.is_none()));
}
