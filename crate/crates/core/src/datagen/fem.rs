//! Linear plane-stress finite elements on bilinear quadrilaterals.
//!
//! Unknowns are ordered `(u_x, u_y)` per node. The stiffness matrix is kept
//! in symmetric band storage and the constrained system is solved with a
//! banded Cholesky factorisation.

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Upper band of a symmetric matrix: `band[i][k]` holds `A[i][i + k]`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    width: usize,
    band: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        let width = half_bandwidth + 1;
        BandMatrix {
            n,
            width,
            band: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.width - 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j - i >= self.width {
            0.0
        } else {
            self.band[i * self.width + j - i]
        }
    }

    /// Adds to the `(i, j)` entry; only `i <= j` is stored.
    pub fn add_upper(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i <= j && j - i < self.width);
        self.band[i * self.width + j - i] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.band[i * self.width..(i + 1) * self.width];
            y[i] += row[0] * x[i];
            for k in 1..self.width.min(self.n - i) {
                let a = row[k];
                y[i] += a * x[i + k];
                y[i + k] += a * x[i];
            }
        }
        y
    }

    /// In-place `A = L Lᵀ`; afterwards `band[i][k]` holds `L[i + k][i]`.
    pub fn cholesky(mut self) -> Result<BandCholesky> {
        let w = self.width;
        for j in 0..self.n {
            let mut d = self.band[j * w];
            for k in j.saturating_sub(w - 1)..j {
                let l = self.band[k * w + j - k];
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(Error::Singular(format!(
                    "stiffness matrix is not positive definite at unknown {j}; \
                     the displacement constraints do not remove every rigid-body mode"
                )));
            }
            let d = d.sqrt();
            self.band[j * w] = d;
            for i in j + 1..(j + w).min(self.n) {
                let mut s = self.band[j * w + i - j];
                for k in i.saturating_sub(w - 1)..j {
                    s -= self.band[k * w + i - k] * self.band[k * w + j - k];
                }
                self.band[j * w + i - j] = s / d;
            }
        }
        Ok(BandCholesky { m: self })
    }
}

#[derive(Clone, Debug)]
pub struct BandCholesky {
    m: BandMatrix,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, w, band) = (self.m.n, self.m.width, &self.m.band);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(w - 1)..i {
                s -= band[k * w + i - k] * y[k];
            }
            y[i] = s / band[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + w).min(n) {
                s -= band[i * w + k - i] * y[k];
            }
            y[i] = s / band[i * w];
        }
        y
    }
}

/// Plane-stress constitutive matrix for unit thickness.
pub fn plane_stress_matrix(e: f64, nu: f64) -> [[f64; 3]; 3] {
    let c = e / (1.0 - nu * nu);
    [[c, c * nu, 0.0], [c * nu, c, 0.0], [0.0, 0.0, c * (1.0 - nu) / 2.0]]
}

/// 8×8 stiffness of a bilinear quad with 2×2 Gauss integration.
pub fn quad_stiffness(xy: &[[f64; 2]; 4], e: f64, nu: f64) -> [[f64; 8]; 8] {
    let d = plane_stress_matrix(e, nu);
    let g = 1.0 / 3f64.sqrt();
    let xi_n = [-1.0, 1.0, 1.0, -1.0];
    let eta_n = [-1.0, -1.0, 1.0, 1.0];
    let mut k = [[0.0; 8]; 8];
    for &(xi, eta) in &[(-g, -g), (g, -g), (g, g), (-g, g)] {
        let mut dn_dxi = [0.0; 4];
        let mut dn_deta = [0.0; 4];
        for a in 0..4 {
            dn_dxi[a] = 0.25 * xi_n[a] * (1.0 + eta_n[a] * eta);
            dn_deta[a] = 0.25 * eta_n[a] * (1.0 + xi_n[a] * xi);
        }
        let mut jac = [[0.0; 2]; 2];
        for a in 0..4 {
            jac[0][0] += dn_dxi[a] * xy[a][0];
            jac[0][1] += dn_dxi[a] * xy[a][1];
            jac[1][0] += dn_deta[a] * xy[a][0];
            jac[1][1] += dn_deta[a] * xy[a][1];
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv = [[jac[1][1] / det, -jac[0][1] / det], [-jac[1][0] / det, jac[0][0] / det]];
        let mut b = [[0.0; 8]; 3];
        for a in 0..4 {
            let dx = inv[0][0] * dn_dxi[a] + inv[0][1] * dn_deta[a];
            let dy = inv[1][0] * dn_dxi[a] + inv[1][1] * dn_deta[a];
            b[0][2 * a] = dx;
            b[1][2 * a + 1] = dy;
            b[2][2 * a] = dy;
            b[2][2 * a + 1] = dx;
        }
        let mut db = [[0.0; 8]; 3];
        for r in 0..3 {
            for c in 0..8 {
                db[r][c] = (0..3).map(|s| d[r][s] * b[s][c]).sum();
            }
        }
        for r in 0..8 {
            for c in 0..8 {
                k[r][c] += det * (0..3).map(|s| b[s][r] * db[s][c]).sum::<f64>();
            }
        }
    }
    k
}

#[derive(Clone, Debug, PartialEq)]
pub struct FemSolution {
    /// `2n` unknowns, `(u_x, u_y)` per node.
    pub u: Vec<f64>,
    /// `K u − f`; nonzero only on constrained unknowns.
    pub reactions: Vec<f64>,
    /// `‖K u − f‖` over free unknowns.
    pub residual_norm: f64,
}

impl FemSolution {
    /// Net applied force plus net reaction, per direction.
    pub fn equilibrium_residual(&self, forces: &[f64]) -> [f64; 2] {
        let mut r = [0.0; 2];
        for (i, (f, q)) in forces.iter().zip(&self.reactions).enumerate() {
            r[i % 2] += f + q;
        }
        r
    }
}

/// Assembles the full stiffness with element modulus = mean of nodal values.
pub fn assemble_stiffness(mesh: &Mesh, nodal_e: &[f64], nu: f64) -> Result<BandMatrix> {
    if mesh.dim() != 2 {
        return Err(Error::InvalidArgument("plane stress needs a 2D mesh".into()));
    }
    if nodal_e.len() != mesh.n_nodes() {
        return Err(Error::shape("nodal modulus", &[nodal_e.len()], &[mesh.n_nodes()]));
    }
    if nodal_e.iter().any(|&e| !(e > 0.0)) || !(nu > 0.0 && nu < 0.5) {
        return Err(Error::InvalidArgument("modulus must be positive and Poisson ratio in (0, 0.5)".into()));
    }
    let mut hb = 0;
    for el in mesh.elements() {
        if el.len() != 4 {
            return Err(Error::InvalidArgument("only 4-node quadrilaterals are supported".into()));
        }
        let lo = el.iter().min().copied().unwrap_or(0);
        let hi = el.iter().max().copied().unwrap_or(0);
        hb = hb.max(2 * (hi - lo) + 1);
    }
    let mut k = BandMatrix::zeros(2 * mesh.n_nodes(), hb);
    for el in mesh.elements() {
        let mut xy = [[0.0; 2]; 4];
        for (a, &node) in el.iter().enumerate() {
            let c = mesh.coord(node);
            xy[a] = [c[0], c[1]];
        }
        let e = el.iter().map(|&i| nodal_e[i]).sum::<f64>() / 4.0;
        let ke = quad_stiffness(&xy, e, nu);
        let dofs: Vec<usize> = el.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        for r in 0..8 {
            for c in 0..8 {
                if dofs[r] <= dofs[c] {
                    k.add_upper(dofs[r], dofs[c], ke[r][c]);
                }
            }
        }
    }
    Ok(k)
}

/// Solves `K u = f` with `u = 0` on `fixed` unknowns.
pub fn solve_plane_stress(
    mesh: &Mesh,
    nodal_e: &[f64],
    nu: f64,
    fixed: &[usize],
    forces: &[f64],
) -> Result<FemSolution> {
    let k = assemble_stiffness(mesh, nodal_e, nu)?;
    let n = k.n();
    if forces.len() != n {
        return Err(Error::shape("nodal forces", &[forces.len()], &[n]));
    }
    let mut is_fixed = vec![false; n];
    for &d in fixed {
        if d >= n {
            return Err(Error::InvalidArgument(format!("constrained unknown {d} out of range")));
        }
        is_fixed[d] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&d| !is_fixed[d]).collect();
    let mut pos = vec![usize::MAX; n];
    for (p, &d) in free.iter().enumerate() {
        pos[d] = p;
    }
    let mut kf = BandMatrix::zeros(free.len(), k.half_bandwidth());
    for (p, &d) in free.iter().enumerate() {
        for e in d..(d + k.half_bandwidth() + 1).min(n) {
            if !is_fixed[e] {
                kf.add_upper(p, pos[e], k.get(d, e));
            }
        }
    }
    let rhs: Vec<f64> = free.iter().map(|&d| forces[d]).collect();
    let uf = kf.cholesky()?.solve(&rhs);
    let mut u = vec![0.0; n];
    for (p, &d) in free.iter().enumerate() {
        u[d] = uf[p];
    }
    let ku = k.mul_vec(&u);
    let mut reactions = vec![0.0; n];
    let mut res2 = 0.0;
    for d in 0..n {
        let r = ku[d] - forces[d];
        if is_fixed[d] {
            reactions[d] = r;
        } else {
            res2 += r * r;
        }
    }
    Ok(FemSolution {
        u,
        reactions,
        residual_norm: res2.sqrt(),
    })
}

/// Consistent nodal loads of a uniform traction on straight boundary segments.
pub fn traction_loads(mesh: &Mesh, segments: &[(usize, usize)], traction: [f64; 2]) -> Vec<f64> {
    let mut f = vec![0.0; 2 * mesh.n_nodes()];
    for &(a, b) in segments {
        let (pa, pb) = (mesh.coord(a), mesh.coord(b));
        let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
        for node in [a, b] {
            f[2 * node] += traction[0] * len / 2.0;
            f[2 * node + 1] += traction[1] * len / 2.0;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn band_cholesky_matches_dense_solve() {
        // tridiagonal SPD system
        let n = 6;
        let mut b = BandMatrix::zeros(n, 1);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            b.add_upper(i, i, 4.0);
            dense[(i, i)] = 4.0;
            if i + 1 < n {
                b.add_upper(i, i + 1, -1.0);
                dense[(i, i + 1)] = -1.0;
                dense[(i + 1, i)] = -1.0;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let x = b.cholesky().unwrap().solve(&rhs);
        let reference = dense.lu().solve(&nalgebra::DVector::from_vec(rhs)).unwrap();
        for (a, r) in x.iter().zip(reference.iter()) {
            assert!((a - r).abs() < 1e-13);
        }
    }

    #[test]
    fn element_stiffness_is_symmetric_with_rigid_modes() {
        let xy = [[0.0, 0.0], [2.0, 0.0], [2.1, 1.0], [0.0, 1.2]];
        let k = quad_stiffness(&xy, 3.0, 0.3);
        for r in 0..8 {
            for c in 0..8 {
                assert!((k[r][c] - k[c][r]).abs() < 1e-12);
            }
            // translation in x produces no force
            let fx: f64 = (0..4).map(|a| k[r][2 * a]).sum();
            assert!(fx.abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_system_is_singular() {
        let m = Mesh::structured_grid(3, 3, 1.0, 1.0).unwrap();
        let err = solve_plane_stress(&m, &[1.0; 9], 0.3, &[], &[0.0; 18]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }
}
