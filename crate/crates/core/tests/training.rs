use std::path::PathBuf;

use discrete_grad::estimators::EstimatorConfig;
use discrete_grad::experiments::{run_cell, run_grid, ExperimentGrid};
use discrete_grad::models::{init_params, ModelParams};
use discrete_grad::train::{evaluate, train, DatasetSpec, RunConfig};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn small_ae(seed: u64) -> RunConfig {
    let mut run = RunConfig::binary_ae(EstimatorConfig::decoupled(0.5, 2.0), seed);
    run.model = discrete_grad::models::ModelSpec::binary_ae(discrete_grad::data::PIXELS, 16);
    run.dataset = DatasetSpec::synthetic(120, 4);
    run.epochs = 2;
    run
}

#[test]
fn categorical_vae_learns_on_mnist() {
    let run = RunConfig::vae_8x4(EstimatorConfig::decoupled(1.6, 1.3), 0);
    let data = run.dataset.load(&data_dir()).expect("bundled MNIST subset");
    let result = train(&run, &data).unwrap();
    let before = result.initial_validation.reconstruction;
    let after = result.final_validation.reconstruction;
    assert!(after <= 0.8 * before, "BCE {before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    result.params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    let reloaded = evaluate(&run.model, &loaded, &data.validation).unwrap();
    assert_eq!(reloaded.total.to_bits(), result.final_validation.total.to_bits());
    let untrained = evaluate(&run.model, &init_params(&run.model, run.seed), &data.validation).unwrap();
    assert!(reloaded.total < untrained.total);
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let run = small_ae(7);
    let data = run.dataset.load(&data_dir()).unwrap();
    let (a, b) = (train(&run, &data).unwrap(), train(&run, &data).unwrap());
    assert_eq!(a.curve().len(), b.curve().len());
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
    }
    assert_eq!(a.final_validation.total.to_bits(), b.final_validation.total.to_bits());
}

#[test]
fn grid_cells_are_isolated_from_scheduling() {
    let base = small_ae(0);
    let data = base.dataset.load(&data_dir()).unwrap();
    let grid = ExperimentGrid::new(vec![0.5, 2.0], vec![0.5, 3.0], vec![0, 1], base);
    let serial = run_grid(&grid, &data, 1).unwrap();
    let parallel = run_grid(&grid, &data, 3).unwrap();
    assert_eq!(serial.len(), 8);
    for (a, b) in serial.iter().zip(&parallel) {
        assert!(a.same_outcome(b));
    }
    let cells = grid.cells();
    let again = run_cell(&grid, &cells[5], &data, false);
    assert!(again.same_outcome(&serial[5]));
}
