//! Meshes, simulations and datasets.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node coordinates, polygonal element connectivity and two named boundaries:
/// `gamma_u` (prescribed displacement) and `gamma_t` (prescribed traction).
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    elements: Vec<Vec<usize>>,
    gamma_u: Vec<usize>,
    gamma_t: Vec<usize>,
}

impl Mesh {
    pub fn new(
        dim: usize,
        coords: Vec<f64>,
        elements: Vec<Vec<usize>>,
        gamma_u: Vec<usize>,
        gamma_t: Vec<usize>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("mesh dimension {dim} not in {{2, 3}}")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::shape("mesh coords", &[coords.len()], &[dim]));
        }
        let n = coords.len() / dim;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite node coordinate".into()));
        }
        for (e, el) in elements.iter().enumerate() {
            if el.len() < 2 {
                return Err(Error::InvalidArgument(format!("element {e} has fewer than 2 nodes")));
            }
            if let Some(&bad) = el.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "element {e} references node {bad} but the mesh has {n} nodes"
                )));
            }
        }
        for (name, set) in [("gamma_u", &gamma_u), ("gamma_t", &gamma_t)] {
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "{name} references node {bad} but the mesh has {n} nodes"
                )));
            }
        }
        let mut gamma_u = gamma_u;
        let mut gamma_t = gamma_t;
        gamma_u.sort_unstable();
        gamma_u.dedup();
        gamma_t.sort_unstable();
        gamma_t.dedup();
        Ok(Mesh {
            dim,
            coords,
            elements,
            gamma_u,
            gamma_t,
        })
    }

    /// Structured `nx × ny` node grid of bilinear quads on `[0, lx] × [0, ly]`.
    ///
    /// Nodes are numbered row by row starting at the origin; both boundary
    /// sets are empty.
    pub fn structured_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!("grid {nx}x{ny} smaller than 2x2")));
        }
        let mut coords = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                coords.push(lx * i as f64 / (nx - 1) as f64);
                coords.push(ly * j as f64 / (ny - 1) as f64);
            }
        }
        let mut elements = Vec::with_capacity((nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                elements.push(vec![a, a + 1, a + 1 + nx, a + nx]);
            }
        }
        Mesh::new(2, coords, elements, vec![], vec![])
    }

    pub fn with_boundaries(mut self, gamma_u: Vec<usize>, gamma_t: Vec<usize>) -> Result<Self> {
        let elements = std::mem::take(&mut self.elements);
        Mesh::new(self.dim, self.coords, elements, gamma_u, gamma_t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn gamma_u(&self) -> &[usize] {
        &self.gamma_u
    }

    pub fn gamma_t(&self) -> &[usize] {
        &self.gamma_t
    }

    /// Unique element sides as sorted `(low, high)` pairs.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for el in &self.elements {
            let k = el.len();
            let sides = if k == 2 { 1 } else { k };
            for s in 0..sides {
                let (a, b) = (el[s], el[(s + 1) % k]);
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
        }
        set.into_iter().collect()
    }

    /// Renumbers nodes so that new node `i` is old node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let inv = inverse_permutation(perm, self.n_nodes())?;
        let mut coords = Vec::with_capacity(self.coords.len());
        for &p in perm {
            coords.extend_from_slice(self.coord(p));
        }
        let elements = self
            .elements
            .iter()
            .map(|el| el.iter().map(|&i| inv[i]).collect())
            .collect();
        let gu = self.gamma_u.iter().map(|&i| inv[i]).collect();
        let gt = self.gamma_t.iter().map(|&i| inv[i]).collect();
        Mesh::new(self.dim, coords, elements, gu, gt)
    }

    /// Shifts every node by `offset`.
    pub fn translate(&self, offset: &[f64]) -> Self {
        let mut m = self.clone();
        for c in m.coords.chunks_mut(self.dim) {
            for (x, o) in c.iter_mut().zip(offset) {
                *x += o;
            }
        }
        m
    }

    /// Breadth-first hop counts from `source` along element sides.
    pub fn graph_distances(&self, source: usize) -> Vec<Option<usize>> {
        let n = self.n_nodes();
        let mut adj = vec![Vec::new(); n];
        for (a, b) in self.undirected_edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut dist = vec![None; n];
        dist[source] = Some(0);
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(i) = queue.pop_front() {
            let d = dist[i].unwrap_or(0);
            for &j in &adj[i] {
                if dist[j].is_none() {
                    dist[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }
}

pub(crate) fn inverse_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>> {
    if perm.len() != n {
        return Err(Error::shape("permutation", &[perm.len()], &[n]));
    }
    let mut inv = vec![usize::MAX; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || inv[p] != usize::MAX {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        inv[p] = i;
    }
    Ok(inv)
}

/// One solved load case: displacement input and target field on a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    /// `n × d` nodal displacements.
    pub u: Tensor,
    /// `n × t` target values (modulus, or nodal load vector).
    pub y: Tensor,
    pub meta: BTreeMap<String, f64>,
}

impl Simulation {
    pub fn new(u: Tensor, y: Tensor) -> Self {
        Simulation {
            u,
            y,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn check_against(&self, mesh: &Mesh) -> Result<()> {
        let n = mesh.n_nodes();
        if self.u.shape() != [n, mesh.dim()] {
            return Err(Error::shape("simulation u", self.u.shape(), &[n, mesh.dim()]));
        }
        if self.y.shape().len() != 2 || self.y.rows() != n {
            return Err(Error::shape("simulation y", self.y.shape(), &[n]));
        }
        Ok(())
    }

    pub fn target_width(&self) -> usize {
        self.y.cols()
    }

    pub fn permute(&self, perm: &[usize]) -> Simulation {
        Simulation {
            u: self.u.permute_rows(perm),
            y: self.y.permute_rows(perm),
            meta: self.meta.clone(),
        }
    }
}

/// Simulations sharing one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mesh: Mesh,
    pub simulations: Vec<Simulation>,
}

impl Dataset {
    pub fn new(mesh: Mesh, simulations: Vec<Simulation>) -> Result<Self> {
        let width = simulations.first().map(Simulation::target_width);
        for s in &simulations {
            s.check_against(&mesh)?;
            if Some(s.target_width()) != width {
                return Err(Error::shape(
                    "dataset target width",
                    &[s.target_width()],
                    &[width.unwrap_or(0)],
                ));
            }
        }
        Ok(Dataset { mesh, simulations })
    }

    pub fn len(&self) -> usize {
        self.simulations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simulations.is_empty()
    }

    pub fn target_width(&self) -> Option<usize> {
        self.simulations.first().map(Simulation::target_width)
    }

    /// Splits into the first `n_first` simulations and the rest.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let n_first = n_first.min(self.len());
        let (a, b) = self.simulations.split_at(n_first);
        (
            Dataset {
                mesh: self.mesh.clone(),
                simulations: a.to_vec(),
            },
            Dataset {
                mesh: self.mesh.clone(),
                simulations: b.to_vec(),
            },
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            mesh: self.mesh.clone(),
            simulations: indices.iter().map(|&i| self.simulations[i].clone()).collect(),
        }
    }
}
