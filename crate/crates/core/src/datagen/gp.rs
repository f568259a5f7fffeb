//! Gaussian-process modulus fields on a square grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Largest diagonal jitter tried before giving up on a factorisation.
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpFieldConfig {
    pub nx: usize,
    pub ny: usize,
    /// Side length of the square domain.
    pub length: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl Default for GpFieldConfig {
    fn default() -> Self {
        GpFieldConfig {
            nx: 12,
            ny: 12,
            length: 1.0,
            alpha: 1.0,
            gamma: 1.0,
            length_scale: 1.0,
            jitter: 1e-10,
        }
    }
}

/// `exp(−‖x − x′‖² / (2ℓ²))`.
pub fn squared_exponential(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

pub fn kernel_matrix(coords: &[f64], dim: usize, length_scale: f64) -> DMatrix<f64> {
    let n = coords.len() / dim;
    DMatrix::from_fn(n, n, |i, j| {
        squared_exponential(&coords[i * dim..(i + 1) * dim], &coords[j * dim..(j + 1) * dim], length_scale)
    })
}

/// Factorised kernel of one grid; draws are `g = L z`.
#[derive(Clone, Debug)]
pub struct GpSampler {
    pub config: GpFieldConfig,
    factor: DMatrix<f64>,
    jitter_used: f64,
}

impl GpSampler {
    pub fn new(config: GpFieldConfig) -> Result<Self> {
        if config.nx < 2 || config.ny < 2 {
            return Err(Error::InvalidArgument("GP grid must be at least 2x2".into()));
        }
        if !(config.length_scale > 0.0) || !(config.jitter >= 0.0) {
            return Err(Error::InvalidArgument("length_scale must be > 0 and jitter >= 0".into()));
        }
        let mesh = Mesh::structured_grid(config.nx, config.ny, config.length, config.length)?;
        let k = kernel_matrix(mesh.coords(), 2, config.length_scale);
        let mut jitter = config.jitter;
        loop {
            let mut kj = k.clone();
            for i in 0..kj.nrows() {
                kj[(i, i)] += jitter;
            }
            if let Some(ch) = kj.cholesky() {
                return Ok(GpSampler {
                    config,
                    factor: ch.unpack(),
                    jitter_used: jitter,
                });
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > MAX_JITTER * (1.0 + 1e-9) {
                return Err(Error::Singular(format!(
                    "GP kernel not positive definite with jitter up to {MAX_JITTER:e}"
                )));
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.factor.nrows()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K + jitter·I`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn g_from_normals(&self, z: &[f64]) -> Vec<f64> {
        (&self.factor * DVector::from_column_slice(z)).as_slice().to_vec()
    }

    pub fn sample_g<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.n_nodes()).map(|_| rng.sample(StandardNormal)).collect();
        self.g_from_normals(&z)
    }

    /// `E = α + γ·exp(g)`.
    pub fn modulus(&self, g: &[f64]) -> Vec<f64> {
        g.iter().map(|v| self.config.alpha + self.config.gamma * v.exp()).collect()
    }

    /// One `(g, E)` draw.
    pub fn sample_field<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let g = self.sample_g(rng);
        let e = self.modulus(&g);
        (g, e)
    }
}
