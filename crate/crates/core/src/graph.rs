//! Node-attributed undirected graphs and the shortest-path utilities built on them.
//!
//! Original graphs carry unit edge weights. Learned task adjacencies are dense
//! directed matrices and live in [`crate::structure`].

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{GlitterError, Result};

/// Distance value for nodes with no path from the source. Strictly larger than
/// any distance BFS can produce on a graph that fits in memory.
pub const UNREACHABLE: u32 = u32::MAX;

pub type NodeId = usize;
pub type ClassId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    id: usize,
    edges: Vec<(NodeId, NodeId)>,
    features: DMatrix<f64>,
    labels: Vec<Option<ClassId>>,
    neighbors: Vec<Vec<NodeId>>,
}

impl Graph {
    /// Builds a graph from raw parts.
    ///
    /// Edges are treated as unordered: each pair is stored once as `(min, max)`,
    /// duplicates are merged and self-loops dropped. Feature rows index nodes.
    pub fn new(
        id: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: DMatrix<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(GlitterError::Schema(format!(
                "graph {id}: {} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % n.max(1), pos / n.max(1));
            return Err(GlitterError::Schema(format!(
                "graph {id}: non-finite feature at node {row}, column {col}"
            )));
        }
        let mut stored = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GlitterError::Schema(format!(
                    "graph {id}: edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u != v {
                stored.push((u.min(v), u.max(v)));
            }
        }
        stored.sort_unstable();
        stored.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &stored {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Self {
            id,
            edges: stored,
            features,
            labels,
            neighbors,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[Option<ClassId>] {
        &self.labels
    }

    pub fn label(&self, node: NodeId) -> Option<ClassId> {
        self.labels[node]
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.neighbors[node].len()
    }

    /// Feature rows of `nodes`, in the given order.
    pub fn feature_rows(&self, nodes: &[NodeId]) -> DMatrix<f64> {
        DMatrix::from_fn(nodes.len(), self.feature_dim(), |r, c| {
            self.features[(nodes[r], c)]
        })
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if node >= self.node_count() {
            return Err(GlitterError::arg(format!(
                "node {node} out of range for graph {} with {} nodes",
                self.id,
                self.node_count()
            )));
        }
        Ok(())
    }
}

/// Unweighted shortest-path distances from one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceVector {
    pub source: NodeId,
    pub dist: Vec<u32>,
}

impl DistanceVector {
    pub fn is_reachable(&self, node: NodeId) -> bool {
        self.dist[node] != UNREACHABLE
    }
}

pub fn bfs_spd(graph: &Graph, source: NodeId) -> Result<DistanceVector> {
    graph.check_node(source)?;
    let mut dist = vec![UNREACHABLE; graph.node_count()];
    let mut queue = VecDeque::new();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        let next = dist[u] + 1;
        for &v in graph.neighbors(u) {
            if dist[v] == UNREACHABLE {
                dist[v] = next;
                queue.push_back(v);
            }
        }
    }
    Ok(DistanceVector { source, dist })
}

/// Pairwise SPD among `nodes` on the original graph; entry `(i, j)` is the
/// distance between `nodes[i]` and `nodes[j]`.
pub fn spd_submatrix(graph: &Graph, nodes: &[NodeId]) -> Result<DMatrix<u32>> {
    let mut seen = std::collections::HashSet::with_capacity(nodes.len());
    for &v in nodes {
        graph.check_node(v)?;
        if !seen.insert(v) {
            return Err(GlitterError::arg(format!("duplicate node id {v}")));
        }
    }
    let k = nodes.len();
    let mut out = DMatrix::from_element(k, k, UNREACHABLE);
    for (i, &v) in nodes.iter().enumerate() {
        let dv = bfs_spd(graph, v)?;
        for (j, &u) in nodes.iter().enumerate() {
            out[(i, j)] = dv.dist[u];
        }
    }
    Ok(out)
}

/// `out[v] = Σ_t SPD(v, t)`, or `+∞` when any target is unreachable from `v`.
pub fn sum_spd_to_targets(graph: &Graph, targets: &[NodeId]) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(GlitterError::arg(
            "sum_spd_to_targets needs at least one target",
        ));
    }
    let mut out = vec![0.0; graph.node_count()];
    for &t in targets {
        let dv = bfs_spd(graph, t)?;
        for (acc, &d) in out.iter_mut().zip(&dv.dist) {
            if d == UNREACHABLE {
                *acc = f64::INFINITY;
            } else {
                *acc += f64::from(d);
            }
        }
    }
    Ok(out)
}

/// Divides each row by its sum. All-zero rows become a self-transition so the
/// result is always row-stochastic.
pub fn row_normalize(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !matrix.is_square() {
        return Err(GlitterError::arg(format!(
            "row_normalize expects a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if let Some(v) = matrix.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(GlitterError::arg(format!(
            "row_normalize expects nonnegative entries, found {v}"
        )));
    }
    let mut out = matrix.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            row.fill(0.0);
            row[i] = 1.0;
        }
    }
    Ok(out)
}
