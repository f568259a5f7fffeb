use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vgnn::datagen::fem::{assemble_stiffness, solve_plane_stress};
use vgnn::datagen::gp::kernel_matrix;
use vgnn::datagen::*;
use vgnn::{io, Mesh};

#[test]
fn gp_empirical_covariance_matches_kernel() {
    let cfg = GpFieldConfig {
        nx: 4,
        ny: 4,
        ..GpFieldConfig::default()
    };
    let sampler = GpSampler::new(cfg.clone()).unwrap();
    let n = sampler.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 2000;
    let mut cov = vec![0.0; n * n];
    let mut mean = vec![0.0; n];
    let samples: Vec<Vec<f64>> = (0..draws).map(|_| sampler.sample_g(&mut rng)).collect();
    for g in &samples {
        for i in 0..n {
            mean[i] += g[i] / draws as f64;
        }
    }
    for g in &samples {
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += (g[i] - mean[i]) * (g[j] - mean[j]) / (draws - 1) as f64;
            }
        }
    }
    let mesh = Mesh::structured_grid(4, 4, 1.0, 1.0).unwrap();
    let k = kernel_matrix(mesh.coords(), 2, 1.0);
    for i in 0..n {
        for j in 0..n {
            assert!(
                (cov[i * n + j] - k[(i, j)]).abs() < 0.05,
                "cov[{i},{j}] = {} vs k = {}",
                cov[i * n + j],
                k[(i, j)]
            );
        }
    }
}

#[test]
fn gp_factor_reproduces_kernel() {
    let sampler = GpSampler::new(GpFieldConfig::default()).unwrap();
    let l = sampler.factor();
    let mesh = Mesh::structured_grid(12, 12, 1.0, 1.0).unwrap();
    let k = kernel_matrix(mesh.coords(), 2, 1.0);
    let diff = (l * l.transpose() - &k).abs().max();
    assert!(diff <= 10.0 * sampler.jitter_used() + 1e-12);
    assert!(sampler.jitter_used() <= gp::MAX_JITTER);
}

#[test]
fn patch_test_homogeneous_plate() {
    let p = PlateProblem::default();
    let mesh = p.mesh().unwrap();
    let e = 2.0;
    let sol = p.solve(&mesh, &vec![e; mesh.n_nodes()]).unwrap();
    for i in 0..mesh.n_nodes() {
        let c = mesh.coord(i);
        let ux = p.traction * c[0] / e;
        let uy = -p.nu * p.traction * c[1] / e;
        assert!((sol.u[2 * i] - ux).abs() <= 1e-9 * (p.traction / e));
        assert!((sol.u[2 * i + 1] - uy).abs() <= 1e-9 * (p.traction / e));
    }
    let f = p.forces(&mesh);
    let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(sol.residual_norm <= 1e-10 * fnorm);
    let [rx, ry] = sol.equilibrium_residual(&f);
    assert!(rx.abs() <= 1e-8 * p.traction && ry.abs() <= 1e-8 * p.traction);
}

#[test]
fn doubling_modulus_halves_displacement() {
    let p = PlateProblem::default();
    let mesh = p.mesh().unwrap();
    let sampler = GpSampler::new(p.gp_config()).unwrap();
    let (_, e) = sampler.sample_field(&mut ChaCha8Rng::seed_from_u64(4));
    let a = p.solve(&mesh, &e).unwrap();
    let e2: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
    let b = p.solve(&mesh, &e2).unwrap();
    for (x, y) in a.u.iter().zip(&b.u) {
        assert!((x - 2.0 * y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn random_field_equilibrium() {
    let p = PlateProblem::default();
    let ds = generate_plate_dataset(&p, 3, 17).unwrap();
    let mesh = &ds.mesh;
    let f = p.forces(mesh);
    for s in &ds.simulations {
        let sol = p.solve(mesh, &s.y.data().to_vec()).unwrap();
        let [rx, ry] = sol.equilibrium_residual(&f);
        assert!(rx.abs() <= 1e-8 * p.traction && ry.abs() <= 1e-8 * p.traction);
        assert!(s.y.data().iter().all(|&v| v > 1.0));
    }
}

/// Energy norm `sqrt(uᵀ K u)` of the fine solution and of the coarse solution
/// interpolated onto the fine grid, both with the same continuous field.
#[test]
fn mesh_refinement_energy_difference_is_small() {
    let coarse = PlateProblem::default();
    let fine = PlateProblem {
        grid: 23,
        ..coarse.clone()
    };
    // one continuous field: draw on the fine grid, coarse nodes are every other fine node
    let sampler = GpSampler::new(fine.gp_config()).unwrap();
    let (_, e_fine) = sampler.sample_field(&mut ChaCha8Rng::seed_from_u64(8));
    let nf = fine.grid;
    let nc = coarse.grid;
    let e_coarse: Vec<f64> = (0..nc * nc)
        .map(|k| e_fine[(2 * (k / nc)) * nf + 2 * (k % nc)])
        .collect();
    let mf = fine.mesh().unwrap();
    let mc = coarse.mesh().unwrap();
    let uf = fine.solve(&mf, &e_fine).unwrap().u;
    let uc = coarse.solve(&mc, &e_coarse).unwrap().u;
    // bilinear interpolation of the coarse solution onto fine nodes
    let mut ui = vec![0.0; 2 * nf * nf];
    for j in 0..nf {
        for i in 0..nf {
            let (ci, cj) = (i / 2, j / 2);
            let (ti, tj) = ((i % 2) as f64 * 0.5, (j % 2) as f64 * 0.5);
            let at = |a: usize, b: usize, c: usize| uc[2 * ((b.min(nc - 1)) * nc + a.min(nc - 1)) + c];
            for c in 0..2 {
                ui[2 * (j * nf + i) + c] = (1.0 - ti) * (1.0 - tj) * at(ci, cj, c)
                    + ti * (1.0 - tj) * at(ci + 1, cj, c)
                    + (1.0 - ti) * tj * at(ci, cj + 1, c)
                    + ti * tj * at(ci + 1, cj + 1, c);
            }
        }
    }
    let k = assemble_stiffness(&mf, &e_fine, fine.nu).unwrap();
    let energy = |u: &[f64]| u.iter().zip(k.mul_vec(u)).map(|(a, b)| a * b).sum::<f64>().sqrt();
    let diff: Vec<f64> = uf.iter().zip(&ui).map(|(a, b)| a - b).collect();
    let rel = energy(&diff) / energy(&uf);
    assert!(rel < 0.02, "relative energy-norm difference {rel}");
}

#[test]
fn plate_regeneration_is_bit_identical() {
    let p = PlateProblem::default();
    let a = generate_plate_dataset(&p, 5, 7).unwrap();
    let b = generate_plate_dataset(&p, 5, 7).unwrap();
    assert_eq!(io::dataset_to_json(&a).to_string(), io::dataset_to_json(&b).to_string());
    let c = generate_plate_dataset(&p, 5, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn simulations_depend_only_on_their_own_seed() {
    let p = PlateProblem::default();
    let a = generate_plate_dataset(&p, 6, 7).unwrap();
    let b = generate_plate_dataset(&p, 3, 7).unwrap();
    assert_eq!(a.simulations[..3], b.simulations[..]);
}

#[test]
fn beam_dataset_layout() {
    let cfg = BeamConfig::default();
    let ds = generate_beam_dataset(&cfg).unwrap();
    assert_eq!(ds.len(), 260);
    assert_eq!(ds.mesh.n_nodes(), 126);
    for s in &ds.simulations {
        let node = s.meta["node"] as usize;
        let load = s.meta["load"];
        let nonzero: Vec<usize> = (0..126).filter(|&i| s.y.row(i) != [0.0, 0.0]).collect();
        assert_eq!(nonzero, vec![node]);
        assert_eq!(s.y.row(node), &[0.0, -load]);
        // the clamped edge does not move
        for j in 0..cfg.ny {
            assert_eq!(s.u.row(j * cfg.nx), &[0.0, 0.0]);
        }
    }
}

#[test]
fn missing_constraints_report_singularity() {
    let mesh = Mesh::structured_grid(3, 3, 1.0, 1.0).unwrap();
    // only u_x on the left edge: vertical rigid motion is free
    let err = solve_plane_stress(&mesh, &[1.0; 9], 0.3, &[0, 6, 12], &[0.0; 18]).unwrap_err();
    assert!(err.to_string().contains("rigid-body"));
}

#[test]
fn unloaded_beam_stays_put() {
    let cfg = BeamConfig::default();
    let s = cfg.simulate(&cfg.mesh().unwrap(), 12, 0.0).unwrap();
    assert!(s.u.data().iter().all(|&v| v == 0.0));
    assert!(s.y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn free_end_load_deflects_more_than_mid_span() {
    let cfg = BeamConfig::default();
    let mesh = cfg.mesh().unwrap();
    let peak = |column| {
        let s = cfg.simulate(&mesh, column, 50.0).unwrap();
        s.u.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    assert!(peak(cfg.nx - 1) > peak(cfg.nx / 2));
}
