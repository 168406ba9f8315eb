//! Graph representations of the electrical network and the communication
//! network, plus the incidence/Laplacian constructions used everywhere else.
//!
//! Both graphs are validated eagerly at construction: downstream code is
//! allowed to assume connectivity and positive parameters without
//! re-checking. Matrices are dense; the tool targets desk-scale networks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("graph needs at least one node")]
    Empty,
    #[error("edge {edge} references node {node} but the graph has {node_count} nodes")]
    NodeOutOfRange {
        edge: usize,
        node: usize,
        node_count: usize,
    },
    #[error("edge {0} is a self-loop")]
    SelfLoop(usize),
    #[error("edge {edge}: {quantity} must be strictly positive, got {value}")]
    NonPositiveParameter {
        edge: usize,
        quantity: &'static str,
        value: f64,
    },
    #[error("graph is not connected")]
    Disconnected,
    #[error("communication weight matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("communication weights must be symmetric: a[{i}][{j}] = {a} but a[{j}][{i}] = {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("communication weight a[{i}][{j}] = {value} is negative")]
    NegativeWeight { i: usize, j: usize, value: f64 },
    #[error("communication self-weight a[{i}][{i}] must be zero, got {value}")]
    NonZeroSelfWeight { i: usize, value: f64 },
}

/// One power line. `source`/`sink` fix the orientation used as the sign
/// reference for positive line current; the orientation itself is arbitrary.
#[derive(Debug, Clone, PartialEq)]
pub struct LineEdge {
    pub source: usize,
    pub sink: usize,
    /// Line resistance in ohm.
    pub resistance: f64,
    /// Line inductance in henry.
    pub inductance: f64,
}

/// Electrical network: buses as nodes, RL power lines as edges.
///
/// Line ids are the positions in `edges`; the orientation stored there is
/// frozen for the lifetime of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalGraph {
    node_count: usize,
    edges: Vec<LineEdge>,
}

impl ElectricalGraph {
    pub fn new(node_count: usize, edges: Vec<LineEdge>) -> Result<Self, NetworkError> {
        if node_count == 0 {
            return Err(NetworkError::Empty);
        }
        for (l, e) in edges.iter().enumerate() {
            for node in [e.source, e.sink] {
                if node >= node_count {
                    return Err(NetworkError::NodeOutOfRange {
                        edge: l,
                        node,
                        node_count,
                    });
                }
            }
            if e.source == e.sink {
                return Err(NetworkError::SelfLoop(l));
            }
            if e.resistance <= 0.0 {
                return Err(NetworkError::NonPositiveParameter {
                    edge: l,
                    quantity: "resistance",
                    value: e.resistance,
                });
            }
            if e.inductance <= 0.0 {
                return Err(NetworkError::NonPositiveParameter {
                    edge: l,
                    quantity: "inductance",
                    value: e.inductance,
                });
            }
        }
        let graph = Self { node_count, edges };
        if !check_connected(&graph.adjacency()) {
            return Err(NetworkError::Disconnected);
        }
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[LineEdge] {
        &self.edges
    }

    /// 0/1 adjacency pattern induced by the edge list.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut adj = DMatrix::zeros(self.node_count, self.node_count);
        for e in &self.edges {
            adj[(e.source, e.sink)] = 1.0;
            adj[(e.sink, e.source)] = 1.0;
        }
        adj
    }

    /// Diagonal of line resistances, in edge order.
    pub fn resistances(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.resistance))
    }

    /// Diagonal of line inductances, in edge order.
    pub fn inductances(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.inductance))
    }
}

/// Communication network given by symmetric nonnegative weights with zero
/// diagonal; an edge is present exactly where the weight is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    weights: DMatrix<f64>,
}

impl CommGraph {
    pub fn new(weights: DMatrix<f64>) -> Result<Self, NetworkError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(NetworkError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(NetworkError::Empty);
        }
        for i in 0..rows {
            if weights[(i, i)] != 0.0 {
                return Err(NetworkError::NonZeroSelfWeight {
                    i,
                    value: weights[(i, i)],
                });
            }
            for j in (i + 1)..cols {
                let (a, b) = (weights[(i, j)], weights[(j, i)]);
                if a != b {
                    return Err(NetworkError::Asymmetric { i, j, a, b });
                }
                if a < 0.0 {
                    return Err(NetworkError::NegativeWeight { i, j, value: a });
                }
            }
        }
        if !check_connected(&weights) {
            return Err(NetworkError::Disconnected);
        }
        Ok(Self { weights })
    }

    /// Build from an explicit edge list `(i, j, a_ij)` with `a_ij > 0`.
    pub fn from_links(node_count: usize, links: &[(usize, usize, f64)]) -> Result<Self, NetworkError> {
        let mut weights = DMatrix::zeros(node_count, node_count);
        for &(i, j, a) in links {
            for node in [i, j] {
                if node >= node_count {
                    return Err(NetworkError::NodeOutOfRange {
                        edge: 0,
                        node,
                        node_count,
                    });
                }
            }
            weights[(i, j)] = a;
            weights[(j, i)] = a;
        }
        Self::new(weights)
    }

    pub fn node_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

/// Node-edge incidence matrix with entries in {-1, 0, +1}: the source of an
/// edge carries -1, the sink +1, so `(B^T V)_l = V_sink - V_source`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    pub matrix: DMatrix<f64>,
}

/// Symmetric positive-semidefinite graph Laplacian. For a connected graph the
/// null space is exactly span(1).
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    pub matrix: DMatrix<f64>,
}

/// Incidence matrix of the electrical graph under its stored orientations.
pub fn build_incidence(graph: &ElectricalGraph) -> IncidenceMatrix {
    let mut b = DMatrix::zeros(graph.node_count(), graph.edge_count());
    for (l, e) in graph.edges().iter().enumerate() {
        b[(e.source, l)] = -1.0;
        b[(e.sink, l)] = 1.0;
    }
    IncidenceMatrix { matrix: b }
}

/// Electrical Laplacian `B R^-1 B^T` with conductance weights `1/R_l`.
pub fn electrical_laplacian(graph: &ElectricalGraph) -> Laplacian {
    let b = build_incidence(graph).matrix;
    let winv = DMatrix::from_diagonal(&graph.resistances().map(|r| 1.0 / r));
    Laplacian {
        matrix: &b * winv * b.transpose(),
    }
}

/// Communication Laplacian: off-diagonal `-a_ij`, diagonal row-degree.
pub fn comm_laplacian(comm: &CommGraph) -> Laplacian {
    let n = comm.node_count();
    let w = comm.weights();
    let mut lap = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if i != j {
                lap[(i, j)] = -w[(i, j)];
                degree += w[(i, j)];
            }
        }
        lap[(i, i)] = degree;
    }
    Laplacian { matrix: lap }
}

/// Breadth-first connectivity of the pattern of nonzero off-diagonal entries.
pub fn check_connected(adjacency: &DMatrix<f64>) -> bool {
    let n = adjacency.nrows();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if i != j && !seen[j] && adjacency[(i, j)] != 0.0 {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}
