//! Mesh-derived graphs and their input features.
//!
//! Every undirected element side becomes two directed edges and each node
//! gets one self-loop. Messages flow from an edge's `src` to its `dst`, so
//! the neighbourhood of node `i` is the set of sources of edges into `i`.
//!
//! Node features are `(u_i, ū, γ_i)` of width `2d + 1`: the node's
//! displacement, the mean displacement of the whole simulation, and the
//! fixed-boundary flag. Edge features are `(x_dst − x_src, ‖x_dst − x_src‖)`
//! of width `d + 1`; self-loops carry zeros.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Simulation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    dim: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    n_undirected: usize,
    /// `n × (2d + 1)`.
    pub node_features: Tensor,
    /// `n_edges × (d + 1)`.
    pub edge_features: Tensor,
}

pub fn node_feature_width(dim: usize) -> usize {
    2 * dim + 1
}

pub fn edge_feature_width(dim: usize) -> usize {
    dim + 1
}

/// Builds the graph of a mesh with zero displacement features.
pub fn build_graph(mesh: &Mesh) -> Graph {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let undirected = mesh.undirected_edges();
    let n_edges = 2 * undirected.len() + n;
    let mut src = Vec::with_capacity(n_edges);
    let mut dst = Vec::with_capacity(n_edges);
    for &(a, b) in &undirected {
        src.extend([a, b]);
        dst.extend([b, a]);
    }
    src.extend(0..n);
    dst.extend(0..n);

    let ew = edge_feature_width(d);
    let mut ef = vec![0.0; n_edges * ew];
    for (k, (&s, &t)) in src.iter().zip(&dst).enumerate() {
        if s == t {
            continue;
        }
        let row = &mut ef[k * ew..(k + 1) * ew];
        let (xs, xt) = (mesh.coord(s), mesh.coord(t));
        let mut norm2 = 0.0;
        for c in 0..d {
            let diff = xt[c] - xs[c];
            row[c] = diff;
            norm2 += diff * diff;
        }
        row[d] = norm2.sqrt();
    }

    let nw = node_feature_width(d);
    let mut nf = vec![0.0; n * nw];
    for &i in mesh.gamma_u() {
        nf[i * nw + 2 * d] = 1.0;
    }

    Graph {
        n_nodes: n,
        dim: d,
        src: src.into(),
        dst: dst.into(),
        n_undirected: undirected.len(),
        node_features: Tensor::matrix(n, nw, nf).expect("node feature shape"),
        edge_features: Tensor::matrix(n_edges, ew, ef).expect("edge feature shape"),
    }
}

/// Builds the graph of `mesh` with node features from `sim`.
pub fn assemble_features(mesh: &Mesh, sim: &Simulation) -> Result<Graph> {
    sim.check_against(mesh)?;
    let mut g = build_graph(mesh);
    g.set_displacement(&sim.u)?;
    Ok(g)
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Directed edges including self-loops.
    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    /// Undirected element sides plus one self-loop per node.
    pub fn n_undirected_with_self(&self) -> usize {
        self.n_undirected + self.n_nodes
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    /// Rewrites the displacement and mean-displacement columns.
    pub fn set_displacement(&mut self, u: &Tensor) -> Result<()> {
        let (n, d) = (self.n_nodes, self.dim);
        if u.shape() != [n, d] {
            return Err(Error::shape("displacement", u.shape(), &[n, d]));
        }
        if !u.all_finite() {
            return Err(Error::InvalidArgument("non-finite displacement".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(u.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let nw = node_feature_width(d);
        let nf = self.node_features.data_mut();
        for i in 0..n {
            let row = &mut nf[i * nw..(i + 1) * nw];
            row[..d].copy_from_slice(u.row(i));
            row[d..2 * d].copy_from_slice(&mean);
        }
        Ok(())
    }

    /// Stacks disjoint graphs into one, offsetting node indices.
    pub fn batch(graphs: &[&Graph]) -> Result<Graph> {
        let Some(first) = graphs.first() else {
            return Err(Error::InvalidArgument("empty graph batch".into()));
        };
        let dim = first.dim;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut nf = Vec::new();
        let mut ef = Vec::new();
        let mut offset = 0;
        let mut n_undirected = 0;
        for g in graphs {
            if g.dim != dim {
                return Err(Error::shape("graph batch dim", &[g.dim], &[dim]));
            }
            src.extend(g.src.iter().map(|i| i + offset));
            dst.extend(g.dst.iter().map(|i| i + offset));
            nf.extend_from_slice(g.node_features.data());
            ef.extend_from_slice(g.edge_features.data());
            offset += g.n_nodes;
            n_undirected += g.n_undirected;
        }
        let n_edges = src.len();
        Ok(Graph {
            n_nodes: offset,
            dim,
            src: src.into(),
            dst: dst.into(),
            n_undirected,
            node_features: Tensor::matrix(offset, node_feature_width(dim), nf)?,
            edge_features: Tensor::matrix(n_edges, edge_feature_width(dim), ef)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plate_grid_edge_counts() {
        let m = Mesh::structured_grid(25, 25, 1.0, 1.0).unwrap();
        let g = build_graph(&m);
        assert_eq!(g.n_nodes(), 625);
        assert_eq!(g.n_edges(), 3025);
        assert_eq!(g.n_undirected_with_self(), 1825);
    }

    #[test]
    fn single_node_has_only_self_loop() {
        let m = Mesh::new(2, vec![0.3, 0.4], vec![], vec![], vec![]).unwrap();
        let g = build_graph(&m);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edge_features.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_grid() {
        let m = Mesh::structured_grid(2, 2, 1.0, 1.0).unwrap();
        let g = build_graph(&m);
        // 4 sides + 4 self-loops
        assert_eq!(g.n_undirected_with_self(), 8);
        assert_eq!(g.n_edges(), 12);
    }

    #[test]
    fn zero_displacement_leaves_only_flags() {
        let m = Mesh::structured_grid(3, 3, 1.0, 1.0)
            .unwrap()
            .with_boundaries(vec![0, 3, 6], vec![2, 5, 8])
            .unwrap();
        let sim = Simulation::new(Tensor::zeros(vec![9, 2]), Tensor::zeros(vec![9, 1]));
        let g = assemble_features(&m, &sim).unwrap();
        for i in 0..9 {
            let row = g.node_features.row(i);
            assert_eq!(&row[..4], &[0.0; 4]);
            let flag = if [0, 3, 6].contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(row[4], flag);
        }
    }

    #[test]
    fn mean_displacement_column() {
        let m = Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0], vec![vec![0, 1]], vec![], vec![]).unwrap();
        let u = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let g = assemble_features(&m, &Simulation::new(u, Tensor::zeros(vec![2, 1]))).unwrap();
        assert_eq!(g.node_features.get(0, 2), 0.5);
        assert_eq!(g.node_features.get(1, 2), 0.5);
    }

    #[test]
    fn edge_feature_on_plate_grid() {
        let m = Mesh::structured_grid(26, 26, 1.0, 1.0).unwrap();
        let g = build_graph(&m);
        // first stored edge is node 0 -> node 1, spacing 1/25 = 0.04
        assert_eq!(g.src()[0], 0);
        assert_eq!(g.dst()[0], 1);
        let row = g.edge_features.row(0);
        assert!((row[0] - 0.04).abs() < 1e-15);
        assert_eq!(row[1], 0.0);
        assert!((row[2] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn nan_displacement_rejected() {
        let m = Mesh::structured_grid(2, 2, 1.0, 1.0).unwrap();
        let mut u = Tensor::zeros(vec![4, 2]);
        u.data_mut()[3] = f64::NAN;
        let sim = Simulation::new(u, Tensor::zeros(vec![4, 1]));
        assert!(assemble_features(&m, &sim).is_err());
    }

    #[test]
    fn batch_offsets_indices() {
        let m = Mesh::structured_grid(2, 2, 1.0, 1.0).unwrap();
        let g = build_graph(&m);
        let b = Graph::batch(&[&g, &g]).unwrap();
        assert_eq!(b.n_nodes(), 8);
        assert_eq!(b.n_edges(), 24);
        assert!(b.src()[12..].iter().all(|&i| i >= 4));
    }
}
