use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgnn::graph::{assemble_features, build_graph};
use vgnn::model::ModelState;
use vgnn::{presets, Mesh, ModelConfig, Simulation, Tape, Tensor};

fn config(passes: usize) -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        message_passes: passes,
        decoder_width: 10,
        ..presets::plate_model()
    }
}

fn plate_case(seed: u64) -> (Mesh, Simulation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = Mesh::structured_grid(5, 4, 1.0, 0.8)
        .unwrap()
        .with_boundaries(vec![0, 5, 10, 15], vec![4, 9, 14, 19])
        .unwrap();
    let u: Vec<f64> = (0..40).map(|_| rng.random_range(-0.3..0.3)).collect();
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..3.0)).collect();
    (
        mesh,
        Simulation::new(Tensor::matrix(20, 2, u).unwrap(), Tensor::matrix(20, 1, y).unwrap()),
    )
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_node_permutation_equivariant(seed in 0u64..1000) {
        let (mesh, sim) = plate_case(seed);
        let state = ModelState::init(config(3), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let noise = state.draw_decoder_noise(&mut rng);
        let mut perm: Vec<usize> = (0..mesh.n_nodes()).collect();
        perm.shuffle(&mut rng);

        let g = assemble_features(&mesh, &sim).unwrap();
        let gp = assemble_features(&mesh.permute(&perm).unwrap(), &sim.permute(&perm)).unwrap();
        let (mu, sigma) = state.predict_with_noise(&g, noise.clone()).unwrap();
        let (mu_p, sigma_p) = state.predict_with_noise(&gp, noise).unwrap();
        let (mu_ref, sigma_ref) = (mu.permute_rows(&perm), sigma.permute_rows(&perm));
        for (a, b) in mu_p.data().iter().zip(mu_ref.data()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
        for (a, b) in sigma_p.data().iter().zip(sigma_ref.data()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn forward_is_translation_invariant(seed in 0u64..1000, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let (mesh, sim) = plate_case(seed);
        let state = ModelState::init(config(2), seed).unwrap();
        let noise = state.draw_decoder_noise(&mut ChaCha8Rng::seed_from_u64(seed));
        let g = assemble_features(&mesh, &sim).unwrap();
        let gt = assemble_features(&mesh.translate(&[dx, dy]), &sim).unwrap();
        let (mu, _) = state.predict_with_noise(&g, noise.clone()).unwrap();
        let (mu_t, _) = state.predict_with_noise(&gt, noise).unwrap();
        for (a, b) in mu_t.data().iter().zip(mu.data()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }
}

/// Path graph 0 - 1 - ... - (n-1) built from two-node elements.
fn path_mesh(n: usize) -> Mesh {
    let coords = (0..n).flat_map(|i| [i as f64 * 0.5, 0.1 * i as f64]).collect();
    let elements = (0..n - 1).map(|i| vec![i, i + 1]).collect();
    Mesh::new(2, coords, elements, vec![0], vec![n - 1]).unwrap()
}

/// `∂μ_target / ∂u_j` for every node `j`, with the mean-displacement columns held fixed.
fn displacement_sensitivity(state: &ModelState, mesh: &Mesh, target: usize) -> Vec<f64> {
    let n = mesh.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let sim = Simulation::new(Tensor::matrix(n, 2, u).unwrap(), Tensor::zeros(vec![n, 1]));
    let graph = assemble_features(mesh, &sim).unwrap();
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let x = tape.param(graph.node_features.clone());
    let a = tape.constant(graph.edge_features.clone());
    let (v, e) = state.encode_features(&mut tape, &bound, x, a).unwrap();
    let (v, _) = state.process(&mut tape, &bound, &graph, v, e).unwrap();
    let ws = state.sample_decoder(&mut tape, &bound, state.zero_decoder_noise()).unwrap();
    let (mu, _) = state.decode(&mut tape, v, &ws).unwrap();
    let mut mask = vec![0.0; n];
    mask[target] = 1.0;
    let m = tape.constant(Tensor::matrix(n, 1, mask).unwrap());
    let picked = tape.mul(mu, m).unwrap();
    let out = tape.sum(picked);
    let grads = tape.backward(out).unwrap();
    let gx = grads.get(x).unwrap();
    (0..n).map(|j| gx.get(j, 0).abs() + gx.get(j, 1).abs()).collect()
}

#[test]
fn sensitivity_vanishes_beyond_message_reach() {
    let mesh = path_mesh(7);
    for passes in 1..=3 {
        let state = ModelState::init(config(passes), 40 + passes as u64).unwrap();
        let target = 0;
        let sens = displacement_sensitivity(&state, &mesh, target);
        let dist = mesh.graph_distances(target);
        for j in 0..mesh.n_nodes() {
            let d = dist[j].unwrap();
            if d > passes {
                assert_eq!(sens[j], 0.0, "m = {passes}: node {j} at distance {d} must not reach node 0");
            } else {
                assert!(sens[j] > 0.0, "m = {passes}: node {j} at distance {d} should reach node 0");
            }
        }
    }
}

#[test]
fn three_node_path_reach_grows_with_passes() {
    let mesh = path_mesh(3);
    let one = displacement_sensitivity(&ModelState::init(config(1), 3).unwrap(), &mesh, 2);
    let two = displacement_sensitivity(&ModelState::init(config(2), 3).unwrap(), &mesh, 2);
    assert_eq!(one[0], 0.0);
    assert!(two[0] > 0.0);
}

#[test]
fn decoder_noise_does_not_touch_latent() {
    let (mesh, sim) = plate_case(9);
    let state = ModelState::init(config(2), 9).unwrap();
    let g = assemble_features(&mesh, &sim).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut latents = Vec::new();
    let mut means = Vec::new();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, false);
        let out = state.forward(&mut tape, &bound, &g, &mut rng).unwrap();
        latents.push(tape.value(out.latent).clone());
        means.push(tape.value(out.mu).clone());
    }
    assert_eq!(latents[0], latents[1]);
    assert_ne!(means[0], means[1]);
}

#[test]
fn isolated_node_aggregates_its_self_loop() {
    let mesh = Mesh::new(2, vec![0.2, 0.3], vec![], vec![], vec![]).unwrap();
    let g = build_graph(&mesh);
    assert_eq!(g.n_edges(), 1);
    let state = ModelState::init(config(1), 2).unwrap();
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let (_, e) = state.encode(&mut tape, &bound, &g).unwrap();
    let m = tape.scatter_add_rows(e, g.dst().clone(), 1).unwrap();
    assert_eq!(tape.value(m).data(), tape.value(e).data());
}

#[test]
fn parameter_counts_near_reported_sizes() {
    let plate = ModelState::init(presets::plate_model(), 0).unwrap().n_parameters();
    let beam = ModelState::init(presets::beam_model(), 0).unwrap().n_parameters();
    assert!((plate as f64 / 23_800.0 - 1.0).abs() < 0.05, "plate model has {plate} parameters");
    assert!((beam as f64 / 6_900.0 - 1.0).abs() < 0.05, "beam model has {beam} parameters");
}
