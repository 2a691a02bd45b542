//! Communication topologies and the graph operators used by the consensus
//! machinery: degree `D`, adjacency `A`, Laplacian `L = D - A`, the oriented
//! incidence matrix `B` (each undirected edge expanded into two opposite
//! directed edges, so `L = ½ B Bᵀ`), the row-stochastic neighbor average
//! `D⁻¹A`, and the edge coupling matrix `L_e = Bᵀ D⁻¹ B`.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{self, Stream};

/// Retry budget for rejection sampling of random connected graphs.
pub const RANDOM_GRAPH_MAX_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("invalid topology: {0}")]
    InvalidTopology(&'static str),
    #[error("edge ({0}, {1}) is out of range for {2} devices")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop at device {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("no connected graph with {edges} edges on {n} devices after {tries} draws")]
    RetriesExhausted { n: usize, edges: usize, tries: usize },
}

/// An undirected, connected, simple graph over devices `0..n`.
///
/// Edges are stored normalized as `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTopology", into = "RawTopology")]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawTopology {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawTopology> for Topology {
    type Error = GraphError;

    fn try_from(raw: RawTopology) -> Result<Self, GraphError> {
        Topology::new(raw.n, raw.edges)
    }
}

impl From<Topology> for RawTopology {
    fn from(t: Topology) -> Self {
        RawTopology {
            n: t.n,
            edges: t.edges,
        }
    }
}

impl Topology {
    /// Validates and normalizes an edge set. Rejects self-loops, duplicates
    /// (in either orientation) and disconnected graphs.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::InvalidTopology("at least one device is required"));
        }
        let mut normalized = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &normalized {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let topology = Self {
            n,
            edges: normalized,
            neighbors,
        };
        if !topology.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(topology)
    }

    /// Ring with edges `(i, (i+1) mod n)`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::InvalidTopology("a ring needs at least 3 devices"));
        }
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    /// Star with device 0 as the hub.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::InvalidTopology("a star needs at least 2 devices"));
        }
        Self::new(n, (1..n).map(|i| (0, i)))
    }

    /// Uniformly random connected graph with exactly `edge_count` edges, by
    /// rejection sampling over uniform edge subsets.
    pub fn random_connected(n: usize, edge_count: usize, seed: u64) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::InvalidTopology("a random graph needs at least 2 devices"));
        }
        let all_pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        if edge_count < n - 1 {
            return Err(GraphError::InvalidTopology("too few edges for a connected graph"));
        }
        if edge_count > all_pairs.len() {
            return Err(GraphError::InvalidTopology("more edges than device pairs"));
        }
        let mut rng = rng::stream(seed, Stream::Topology, &[n as u64, edge_count as u64]);
        for _ in 0..RANDOM_GRAPH_MAX_TRIES {
            let picked = index::sample(&mut rng, all_pairs.len(), edge_count);
            match Self::new(n, picked.iter().map(|k| all_pairs[k])) {
                Ok(t) => return Ok(t),
                Err(GraphError::Disconnected) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(GraphError::RetriesExhausted {
            n,
            edges: edge_count,
            tries: RANDOM_GRAPH_MAX_TRIES,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor list `N_i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    /// Directed edges in incidence-column order: for each undirected edge
    /// `{i, j}` with `i < j`, both `(i, j)` and `(j, i)`, sorted lexicographically.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .edges
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect();
        out.sort_unstable();
        out
    }

    /// Arithmetic mean of `values` over `N_i`, by a plain loop.
    pub fn neighbor_mean(&self, i: usize, values: &[f64]) -> f64 {
        let nb = &self.neighbors[i];
        nb.iter().map(|&j| values[j]).sum::<f64>() / nb.len() as f64
    }

    pub fn operators(&self) -> GraphOperators {
        GraphOperators::new(self)
    }
}

/// Dense graph operators. Every entry is an integer or an exact reciprocal
/// of a degree, so the structural identities hold exactly in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOperators {
    pub degree: Matrix,
    pub degree_inv: Matrix,
    pub adjacency: Matrix,
    pub laplacian: Matrix,
    /// `n × 2|E|`; column `k` is `+1` at the tail and `-1` at the head of
    /// `directed_edges[k]`.
    pub incidence: Matrix,
    /// Row-stochastic `D⁻¹A`.
    pub neighbor_avg: Matrix,
    /// `L_e = Bᵀ D⁻¹ B`.
    pub edge_coupling: Matrix,
    pub directed_edges: Vec<(usize, usize)>,
}

impl GraphOperators {
    pub fn new(t: &Topology) -> Self {
        let n = t.num_devices();
        let degrees = t.degrees();
        let degree = Matrix::from_fn(n, n, |i, j| if i == j { degrees[i] as f64 } else { 0.0 });
        let degree_inv =
            Matrix::from_fn(n, n, |i, j| if i == j { 1.0 / degrees[i] as f64 } else { 0.0 });
        let mut adjacency = Matrix::zeros(n, n);
        for &(a, b) in t.edges() {
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        let laplacian = degree.sub(&adjacency);
        let directed_edges = t.directed_edges();
        let mut incidence = Matrix::zeros(n, directed_edges.len());
        for (k, &(tail, head)) in directed_edges.iter().enumerate() {
            incidence[(tail, k)] = 1.0;
            incidence[(head, k)] = -1.0;
        }
        let neighbor_avg = Matrix::from_fn(n, n, |i, j| {
            if adjacency[(i, j)] != 0.0 {
                1.0 / degrees[i] as f64
            } else {
                0.0
            }
        });
        let edge_coupling = incidence.transpose().matmul(&degree_inv).matmul(&incidence);
        Self {
            degree,
            degree_inv,
            adjacency,
            laplacian,
            incidence,
            neighbor_avg,
            edge_coupling,
            directed_edges,
        }
    }

    pub fn num_devices(&self) -> usize {
        self.degree.rows()
    }

    pub fn num_directed_edges(&self) -> usize {
        self.directed_edges.len()
    }

    /// `d = Bᵀ y`: per directed edge `(s, e)`, `y_s - y_e`.
    pub fn edge_differences(&self, y: &[f64]) -> Vec<f64> {
        self.incidence.tr_matvec(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring3_edges_and_laplacian() {
        let t = Topology::ring(3).unwrap();
        assert_eq!(t.edges(), &[(0, 1), (0, 2), (1, 2)]);
        let ops = t.operators();
        let expected = Matrix::from_vec(3, 3, vec![2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(ops.laplacian, expected);
    }

    #[test]
    fn ring10_degrees() {
        let t = Topology::ring(10).unwrap();
        assert_eq!(t.num_edges(), 10);
        assert!(t.degrees().iter().all(|&d| d == 2));
    }

    #[test]
    fn ring_rejects_small_n() {
        assert!(matches!(Topology::ring(2), Err(GraphError::InvalidTopology(_))));
        assert!(matches!(Topology::star(1), Err(GraphError::InvalidTopology(_))));
    }

    #[test]
    fn star_degrees() {
        let t = Topology::star(4).unwrap();
        assert_eq!(t.degrees(), vec![3, 1, 1, 1]);
        assert_eq!(Topology::star(10).unwrap().num_edges(), 9);
        let two = Topology::star(2).unwrap();
        assert_eq!(two.edges(), &[(0, 1)]);
        let rows = t.operators().neighbor_avg.row_sums();
        assert!(rows.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn incidence_null_space_contains_ones() {
        let ops = Topology::ring(4).unwrap().operators();
        let d = ops.edge_differences(&[1.0; 4]);
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_graph_tree_case_and_bounds() {
        let t = Topology::random_connected(3, 2, 5).unwrap();
        assert_eq!(t.num_edges(), 2);
        assert!(t.is_connected());
        assert!(Topology::random_connected(5, 3, 1).is_err());
        assert!(Topology::random_connected(5, 11, 1).is_err());
    }

    #[test]
    fn random_graph_is_seed_deterministic() {
        let a = Topology::random_connected(20, 20, 42).unwrap();
        let b = Topology::random_connected(20, 20, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_edges(), 20);
    }

    #[test]
    fn rejects_malformed_edges() {
        assert_eq!(Topology::new(3, [(0, 0)]), Err(GraphError::SelfLoop(0)));
        assert_eq!(
            Topology::new(3, [(0, 1), (1, 0), (1, 2)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert_eq!(Topology::new(4, [(0, 1), (2, 3)]), Err(GraphError::Disconnected));
        assert_eq!(Topology::new(2, [(0, 2)]), Err(GraphError::EdgeOutOfRange(0, 2, 2)));
    }
}
