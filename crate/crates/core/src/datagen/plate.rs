//! Plate under uniaxial tension with a random modulus field.
//!
//! Unit square, left edge held in `x` with the origin pinned in both
//! directions, uniform traction `σ_x` on the right edge. The input is the
//! displacement field and the target is the nodal Young's modulus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fem::{solve_plane_stress, traction_loads, FemSolution};
use super::gp::{GpFieldConfig, GpSampler};
use crate::error::{Error, Result};
use crate::mesh::{Dataset, Mesh, Simulation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateProblem {
    /// Nodes per side.
    pub grid: usize,
    pub length: f64,
    pub traction: f64,
    pub nu: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl Default for PlateProblem {
    fn default() -> Self {
        PlateProblem {
            grid: 12,
            length: 1.0,
            traction: 1.5,
            nu: 0.3,
            alpha: 1.0,
            gamma: 1.0,
            length_scale: 1.0,
            jitter: 1e-10,
        }
    }
}

impl PlateProblem {
    pub fn gp_config(&self) -> GpFieldConfig {
        GpFieldConfig {
            nx: self.grid,
            ny: self.grid,
            length: self.length,
            alpha: self.alpha,
            gamma: self.gamma,
            length_scale: self.length_scale,
            jitter: self.jitter,
        }
    }

    /// Grid mesh with the left edge fixed and the right edge loaded.
    pub fn mesh(&self) -> Result<Mesh> {
        let n = self.grid;
        let left = (0..n).map(|j| j * n).collect();
        let right = (0..n).map(|j| j * n + n - 1).collect();
        Mesh::structured_grid(n, n, self.length, self.length)?.with_boundaries(left, right)
    }

    /// `u_x` on the left edge and `u_y` at the origin.
    pub fn fixed_dofs(&self) -> Vec<usize> {
        let n = self.grid;
        let mut d: Vec<usize> = (0..n).map(|j| 2 * j * n).collect();
        d.push(1);
        d
    }

    pub fn forces(&self, mesh: &Mesh) -> Vec<f64> {
        let n = self.grid;
        let segments: Vec<_> = (0..n - 1).map(|j| (j * n + n - 1, (j + 1) * n + n - 1)).collect();
        traction_loads(mesh, &segments, [self.traction, 0.0])
    }

    pub fn solve(&self, mesh: &Mesh, nodal_e: &[f64]) -> Result<FemSolution> {
        if !(self.nu > 0.0 && self.nu < 0.5) {
            return Err(Error::InvalidArgument("Poisson ratio must lie in (0, 0.5)".into()));
        }
        solve_plane_stress(mesh, nodal_e, self.nu, &self.fixed_dofs(), &self.forces(mesh))
    }
}

/// `n_sims` independent fields; simulation `i` draws from seed `seed ^ i`.
pub fn generate_plate_dataset(problem: &PlateProblem, n_sims: usize, seed: u64) -> Result<Dataset> {
    let mesh = problem.mesh()?;
    let sampler = GpSampler::new(problem.gp_config())?;
    let n = mesh.n_nodes();
    let mut sims = Vec::with_capacity(n_sims);
    for i in 0..n_sims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let (_, e) = sampler.sample_field(&mut rng);
        let sol = problem.solve(&mesh, &e)?;
        sims.push(
            Simulation::new(Tensor::matrix(n, 2, sol.u)?, Tensor::matrix(n, 1, e)?).with_meta("index", i as f64),
        );
    }
    Dataset::new(mesh, sims)
}
