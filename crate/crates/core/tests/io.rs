use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vgnn::datagen::{generate_plate_dataset, PlateProblem};
use vgnn::graph::assemble_features;
use vgnn::infer::predict;
use vgnn::io::*;
use vgnn::{presets, Error, ModelConfig, ModelState};

fn small_model() -> ModelState {
    let cfg = ModelConfig {
        latent_dim: 5,
        decoder_width: 7,
        ..presets::plate_model()
    };
    ModelState::init(cfg, 13).unwrap()
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let state = small_model();
    write_checkpoint(&path, &state).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.config, state.config);
    assert_eq!(back.params, state.params);

    let p = PlateProblem { grid: 4, ..PlateProblem::default() };
    let ds = generate_plate_dataset(&p, 1, 3).unwrap();
    let g = assemble_features(&ds.mesh, &ds.simulations[0]).unwrap();
    let a = predict(&state, &g, 4, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = predict(&back, &g, 4, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_schema_errors() {
    let good = checkpoint_to_json(&small_model()).unwrap();

    let mut v = good.clone();
    v["format"] = json!("something-else");
    assert!(matches!(checkpoint_from_json(v), Err(Error::Schema { .. })));

    let mut v = good.clone();
    v["params"].as_object_mut().unwrap().remove("prior.gap");
    assert!(matches!(checkpoint_from_json(v), Err(Error::Schema { .. })));

    let mut v = good.clone();
    v["params"]["prior.gap"]["shape"] = json!([2]);
    assert!(checkpoint_from_json(v).unwrap_err().exit_code() == 4);

    let mut v = good;
    v["model"]["latent_dim"] = json!("wide");
    assert_eq!(checkpoint_from_json(v).unwrap_err().exit_code(), 4);
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    let ds = generate_plate_dataset(&PlateProblem { grid: 5, ..PlateProblem::default() }, 3, 1).unwrap();
    write_dataset(&path, &ds).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert_eq!(import_external_dataset(&path).unwrap(), ds);
}

#[test]
fn missing_file_is_io_error() {
    let err = read_dataset("/nonexistent/dir/ds.json").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = write_checkpoint("/nonexistent/dir/ck.json", &small_model()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prediction_csv_columns() {
    let state = ModelState::init(presets::beam_model(), 0).unwrap();
    let cfg = vgnn::datagen::BeamConfig {
        columns: vec![20],
        loads: vec![50.0],
        ..Default::default()
    };
    let ds = vgnn::datagen::generate_beam_dataset(&cfg).unwrap();
    let g = assemble_features(&ds.mesh, &ds.simulations[0]).unwrap();
    let f = predict(&state, &g, 2, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let csv = prediction_csv(&ds.mesh, &f, &ds.simulations[0].y).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,x,y,truth_0,truth_1,mean_0,mean_1,s_a_0,s_a_1,s_e_0,s_e_1,lower_0,lower_1,upper_0,upper_1"
    );
    assert_eq!(lines.count(), ds.mesh.n_nodes());
}
