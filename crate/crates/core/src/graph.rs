//! Coupling topology: undirected graphs, incidence matrices, Laplacians and
//! edge-space utilities.
//!
//! Edge `k = (i, j)` is oriented as stored, so column `k` of the incidence
//! matrix has `+1` in row `i` and `-1` in row `j`, and the relative output on
//! that edge is `zeta_k = y_i - y_j`.

use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual above which a target formation is rejected as not lying in `Im(E^T)`.
pub const EDGE_SPACE_TOL: f64 = 1e-8;

const RANK_TOL: f64 = 1e-9;

/// A simple undirected graph with a fixed orientation per edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndirectedGraph {
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
}

impl UndirectedGraph {
    pub fn new(num_vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_vertices == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        let mut seen = HashSet::new();
        for &(i, j) in &edges {
            if i >= num_vertices || j >= num_vertices {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) out of range for {num_vertices} vertices")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidGraph(format!("duplicate edge {{{i}, {j}}}")));
            }
        }
        Ok(Self { num_vertices, edges })
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)).collect())
    }

    /// Cycle `C_n`; needs `n >= 3`.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidGraph(format!("cycle needs n >= 3, got {n}")));
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((n - 1, 0));
        Self::new(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        Self::new(n, edges)
    }

    /// Star with center vertex 0.
    pub fn star(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (0, i)).collect())
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_vertices];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    fn bfs_distances(adj: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; adj.len()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap_or(0);
            for &w in &adj[v] {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency_lists();
        Self::bfs_distances(&adj, 0).iter().all(Option::is_some)
    }

    /// Longest shortest-path length; `None` for disconnected graphs.
    pub fn diameter(&self) -> Option<usize> {
        let adj = self.adjacency_lists();
        let mut best = 0;
        for s in 0..self.num_vertices {
            for d in Self::bfs_distances(&adj, s) {
                best = best.max(d?);
            }
        }
        Some(best)
    }

    pub fn incidence_matrix(&self) -> IncidenceMatrix {
        let mut e = DMatrix::zeros(self.num_vertices, self.edges.len());
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            e[(i, k)] = 1.0;
            e[(j, k)] = -1.0;
        }
        IncidenceMatrix::from_matrix(e)
    }
}

/// Dense vertex-by-edge incidence matrix together with a cached orthonormal
/// basis of the edge space `Im(E^T)`.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    matrix: DMatrix<f64>,
    // columns: orthonormal basis of Im(E^T), shape |E| x rank
    edge_basis: DMatrix<f64>,
    // minimum-norm right inverse of E^T restricted to Im(E^T): |V| x |E|
    pinv_t: DMatrix<f64>,
}

impl IncidenceMatrix {
    fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let (n, m) = matrix.shape();
        if m == 0 {
            return Self { matrix, edge_basis: DMatrix::zeros(0, 0), pinv_t: DMatrix::zeros(n, 0) };
        }
        let et = matrix.transpose();
        let svd = et.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let sigma_max = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > RANK_TOL * sigma_max.max(1.0))
            .collect();
        let mut edge_basis = DMatrix::zeros(m, keep.len());
        let mut pinv_t = DMatrix::zeros(n, m);
        for (c, &k) in keep.iter().enumerate() {
            edge_basis.set_column(c, &u.column(k));
            let s = svd.singular_values[k];
            pinv_t += (v_t.row(k).transpose() / s) * u.column(k).transpose();
        }
        Self { matrix, edge_basis, pinv_t }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_vertices(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.matrix.ncols()
    }

    /// Graph Laplacian `E E^T`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        &self.matrix * self.matrix.transpose()
    }

    /// `E diag(w) E^T`.
    pub fn weighted_laplacian(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.matrix.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= weights[k];
        }
        scaled * self.matrix.transpose()
    }

    pub fn rank(&self) -> usize {
        self.edge_basis.ncols()
    }

    /// Orthonormal basis of `Im(E^T)`, one column per dimension.
    pub fn edge_space_basis(&self) -> &DMatrix<f64> {
        &self.edge_basis
    }

    /// `zeta = E^T y`.
    pub fn relative(&self, y: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(y)
    }

    /// `E mu`.
    pub fn apply(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.matrix * mu
    }

    /// Orthogonal projection of an edge vector onto `Im(E^T)`.
    pub fn project_edge_space(&self, zeta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_edge_len(zeta)?;
        if self.edge_basis.ncols() == 0 {
            return Ok(DVector::zeros(zeta.len()));
        }
        Ok(&self.edge_basis * self.edge_basis.tr_mul(zeta))
    }

    /// Minimum-norm `y` with `E^T y` equal to the projection of `zeta`.
    pub fn min_norm_preimage(&self, zeta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_edge_len(zeta)?;
        Ok(&self.pinv_t * zeta)
    }

    /// Rejects formations whose distance to `Im(E^T)` exceeds [`EDGE_SPACE_TOL`].
    pub fn validate_formation(&self, zeta_star: &DVector<f64>) -> Result<()> {
        let proj = self.project_edge_space(zeta_star)?;
        let residual = (zeta_star - proj).norm();
        if residual > EDGE_SPACE_TOL {
            return Err(Error::NotInEdgeSpace { residual });
        }
        Ok(())
    }

    fn check_edge_len(&self, zeta: &DVector<f64>) -> Result<()> {
        if zeta.len() != self.num_edges() {
            return Err(Error::DimensionMismatch { expected: self.num_edges(), got: zeta.len() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rejects_invalid_edges() {
        assert!(UndirectedGraph::new(3, vec![(0, 0)]).is_err());
        assert!(UndirectedGraph::new(3, vec![(0, 3)]).is_err());
        assert!(UndirectedGraph::new(3, vec![(0, 1), (1, 0)]).is_err());
        assert!(UndirectedGraph::cycle(2).is_err());
    }

    #[test]
    fn single_edge_column() {
        let e = UndirectedGraph::path(2).unwrap().incidence_matrix();
        assert_eq!(e.matrix().column(0).as_slice(), &[1.0, -1.0]);
        assert_eq!(e.laplacian(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn cycle_three_structure() {
        let g = UndirectedGraph::cycle(3).unwrap();
        let e = g.incidence_matrix();
        assert_eq!(e.matrix().shape(), (3, 3));
        for col in e.matrix().column_iter() {
            assert_eq!(col.sum(), 0.0);
        }
        assert_eq!(e.rank(), 2);
        let l = e.laplacian();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l[(i, j)], if i == j { 2.0 } else { -1.0 });
            }
        }
        let mut eig: Vec<f64> = l.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert!(eig[0].abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12 && (eig[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_kills_ones() {
        let e = UndirectedGraph::star(5).unwrap().incidence_matrix();
        let ones = DVector::from_element(5, 1.0);
        assert!((e.laplacian() * ones).norm() < 1e-14);
    }

    #[test]
    fn projection_cases() {
        let c3 = UndirectedGraph::cycle(3).unwrap().incidence_matrix();
        let cycle_vec = dvector![1.0, 1.0, 1.0];
        assert!(c3.project_edge_space(&cycle_vec).unwrap().norm() < 1e-12);
        assert!(c3.validate_formation(&cycle_vec).is_err());

        let inside = c3.relative(&dvector![0.3, -1.0, 2.0]);
        let p = c3.project_edge_space(&inside).unwrap();
        assert!((p - &inside).norm() < 1e-12);
        let y = c3.min_norm_preimage(&inside).unwrap();
        assert!((c3.relative(&y) - inside).norm() < 1e-12);
        assert!(y.sum().abs() < 1e-12);

        let path = UndirectedGraph::path(4).unwrap().incidence_matrix();
        let z = dvector![0.5, -2.0, 7.0];
        assert!((path.project_edge_space(&z).unwrap() - &z).norm() < 1e-12);
    }

    #[test]
    fn diameters() {
        assert_eq!(UndirectedGraph::cycle(30).unwrap().diameter(), Some(15));
        assert_eq!(UndirectedGraph::path(4).unwrap().diameter(), Some(3));
        assert_eq!(UndirectedGraph::complete(5).unwrap().diameter(), Some(1));
        let g = UndirectedGraph::new(3, vec![(0, 1)]).unwrap();
        assert!(!g.is_connected());
        assert_eq!(g.diameter(), None);
    }

    #[test]
    fn edgeless_graph() {
        let e = UndirectedGraph::new(1, vec![]).unwrap().incidence_matrix();
        assert_eq!(e.num_edges(), 0);
        assert_eq!(e.rank(), 0);
        assert_eq!(e.project_edge_space(&DVector::zeros(0)).unwrap().len(), 0);
    }
}
