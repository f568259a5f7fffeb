//! Cantilever load localisation in plane stress.
//!
//! A rectangular beam clamped on its left edge carries one downward nodal
//! load on the top edge. The input is the displacement field; the target is
//! the nodal load vector, zero everywhere except at the loaded node.

use serde::{Deserialize, Serialize};

use super::fem::solve_plane_stress;
use crate::error::{Error, Result};
use crate::mesh::{Dataset, Mesh, Simulation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub nx: usize,
    pub ny: usize,
    pub length: f64,
    pub height: f64,
    pub modulus: f64,
    pub nu: f64,
    /// Load magnitudes, applied downward.
    pub loads: Vec<f64>,
    /// Top-edge columns that may carry the load.
    pub columns: Vec<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            nx: 21,
            ny: 6,
            length: 40.0,
            height: 10.0,
            modulus: 1000.0,
            nu: 0.3,
            loads: (1..=20).map(|k| 5.0 * k as f64).collect(),
            columns: (8..21).collect(),
        }
    }
}

impl BeamConfig {
    /// Clamped left edge; the top edge carries the load.
    pub fn mesh(&self) -> Result<Mesh> {
        let left = (0..self.ny).map(|j| j * self.nx).collect();
        let top = (0..self.nx).map(|i| self.top_node(i)).collect();
        Mesh::structured_grid(self.nx, self.ny, self.length, self.height)?.with_boundaries(left, top)
    }

    pub fn top_node(&self, column: usize) -> usize {
        (self.ny - 1) * self.nx + column
    }

    pub fn fixed_dofs(&self) -> Vec<usize> {
        (0..self.ny).flat_map(|j| [2 * j * self.nx, 2 * j * self.nx + 1]).collect()
    }

    /// Solves one load case; `load` is the downward magnitude.
    pub fn simulate(&self, mesh: &Mesh, column: usize, load: f64) -> Result<Simulation> {
        if column >= self.nx {
            return Err(Error::InvalidArgument(format!("load column {column} outside the beam")));
        }
        let n = mesh.n_nodes();
        let node = self.top_node(column);
        let mut forces = vec![0.0; 2 * n];
        forces[2 * node + 1] = -load;
        let sol = solve_plane_stress(mesh, &vec![self.modulus; n], self.nu, &self.fixed_dofs(), &forces)?;
        let mut y = vec![0.0; 2 * n];
        y[2 * node + 1] = -load;
        Ok(Simulation::new(Tensor::matrix(n, 2, sol.u)?, Tensor::matrix(n, 2, y)?)
            .with_meta("load", load)
            .with_meta("node", node as f64))
    }
}

/// Every `(column, load)` pair, columns outermost.
pub fn generate_beam_dataset(cfg: &BeamConfig) -> Result<Dataset> {
    if cfg.columns.is_empty() || cfg.loads.is_empty() {
        return Err(Error::InvalidArgument("beam dataset needs load columns and magnitudes".into()));
    }
    let mesh = cfg.mesh()?;
    let mut sims = Vec::with_capacity(cfg.columns.len() * cfg.loads.len());
    for &c in &cfg.columns {
        for &f in &cfg.loads {
            sims.push(cfg.simulate(&mesh, c, f)?);
        }
    }
    Dataset::new(mesh, sims)
}
