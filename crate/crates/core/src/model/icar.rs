//! Intrinsic CAR structure matrix R: diagonal of neighbor counts, -1 for
//! each neighbor pair. R is positive semidefinite with rank D minus the
//! number of connected components; `R 1 = 0` on every component.

use crate::math::sparse::{SymTriplets, SymmCsc};
use crate::population::AdjacencyGraph;

#[derive(Debug, Clone)]
pub struct IcarStructure {
    d_count: usize,
    edges: Vec<(usize, usize)>,
    neighbor_lists: Vec<Vec<usize>>,
    neighbor_counts: Vec<usize>,
    rank: usize,
}

impl IcarStructure {
    pub fn from_graph(graph: &AdjacencyGraph) -> IcarStructure {
        let d = graph.d_count();
        let mut edges = Vec::with_capacity(graph.edge_count());
        for a in 0..d {
            for &b in graph.neighbors(a) {
                if b > a {
                    edges.push((a, b));
                }
            }
        }
        let neighbor_lists = (0..d).map(|a| graph.neighbors(a).to_vec()).collect();
        let neighbor_counts = (0..d).map(|a| graph.neighbor_count(a)).collect();
        let rank = d - graph.component_count();
        IcarStructure {
            d_count: d,
            edges,
            neighbor_lists,
            neighbor_counts,
            rank,
        }
    }

    pub fn neighbors(&self, d: usize) -> &[usize] {
        &self.neighbor_lists[d]
    }

    pub fn d_count(&self) -> usize {
        self.d_count
    }

    /// Rank of R: D minus the number of connected components.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn neighbor_counts(&self) -> &[usize] {
        &self.neighbor_counts
    }

    /// upsilon' R upsilon = sum over edges of (u_a - u_b)^2.
    pub fn quad_form(&self, upsilon: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b)| (upsilon[a] - upsilon[b]).powi(2))
            .sum()
    }

    /// y = R upsilon.
    pub fn mul_vec(&self, upsilon: &[f64], y: &mut [f64]) {
        for (i, (yi, &c)) in y.iter_mut().zip(&self.neighbor_counts).enumerate() {
            *yi = c as f64 * upsilon[i];
        }
        for &(a, b) in &self.edges {
            y[a] -= upsilon[b];
            y[b] -= upsilon[a];
        }
    }

    /// Scatter tau * (R + jitter I) into a triplet builder at `offset`.
    pub fn add_precision_triplets(
        &self,
        t: &mut SymTriplets,
        offset: usize,
        tau: f64,
        diagonal_jitter: f64,
    ) {
        for (i, &c) in self.neighbor_counts.iter().enumerate() {
            t.add(offset + i, offset + i, tau * (c as f64 + diagonal_jitter));
        }
        for &(a, b) in &self.edges {
            t.add(offset + a, offset + b, -tau);
        }
    }
}

/// The structure matrix scaled by the precision: tau * R.
pub fn build_icar_precision(graph: &AdjacencyGraph, tau: f64) -> SymmCsc {
    let icar = IcarStructure::from_graph(graph);
    let mut t = SymTriplets::new(graph.d_count());
    icar.add_precision_triplets(&mut t, 0, tau, 0.0);
    t.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_from(d: usize, edges: &[(usize, usize)]) -> AdjacencyGraph {
        AdjacencyGraph::from_edges(d, edges).unwrap()
    }

    #[test]
    fn two_node_path_matches_definition() {
        let g = graph_from(2, &[(0, 1)]);
        let r = build_icar_precision(&g, 1.0);
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(1, 1), 1.0);
        assert_eq!(r.get(0, 1), -1.0);
        assert_eq!(r.get(1, 0), -1.0);
    }

    #[test]
    fn rows_sum_to_zero_on_any_graph() {
        let g = graph_from(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5)]);
        let r = build_icar_precision(&g, 2.5);
        let ones = vec![1.0; 6];
        let mut y = vec![0.0; 6];
        r.mul_vec(&ones, &mut y);
        for v in y {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn four_cycle_eigenvalues() {
        let g = graph_from(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let r = build_icar_precision(&g, 1.0);
        let dense = r.to_dense();
        let m = nalgebra::DMatrix::from_fn(4, 4, |i, j| dense[i][j]);
        let eig = m.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = [0.0, 2.0, 2.0, 4.0];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-10, "eigenvalues {vals:?}");
        }
    }

    #[test]
    fn rank_counts_components() {
        let g = graph_from(7, &[(0, 1), (1, 2), (3, 4)]); // components {0,1,2},{3,4},{5},{6}
        let icar = IcarStructure::from_graph(&g);
        assert_eq!(icar.rank(), 7 - 4);
    }

    #[test]
    fn quad_form_matches_matrix_product() {
        let g = graph_from(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let icar = IcarStructure::from_graph(&g);
        let r = build_icar_precision(&g, 1.0);
        let u = [0.3, -1.2, 0.5, 2.0, -0.7];
        let mut y = vec![0.0; 5];
        r.mul_vec(&u, &mut y);
        let via_matrix: f64 = u.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((icar.quad_form(&u) - via_matrix).abs() < 1e-12);
        let mut y2 = vec![0.0; 5];
        icar.mul_vec(&u, &mut y2);
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quad_form_invariant_to_constant_shift() {
        let g = graph_from(4, &[(0, 1), (1, 2), (2, 3)]);
        let icar = IcarStructure::from_graph(&g);
        let u = [0.4, -0.2, 1.0, 0.1];
        let shifted: Vec<f64> = u.iter().map(|v| v + 3.7).collect();
        assert!((icar.quad_form(&u) - icar.quad_form(&shifted)).abs() < 1e-10);
    }
}
