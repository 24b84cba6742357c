//! Task-specific structure: node selection for a meta-task and the learned
//! dense directed adjacency over the selected nodes.
//!
//! Edge weight from node `i` to node `j` is the mean of a representation term
//! `exp(-‖ û_i - v̂_j ‖)` (with `û`, `v̂` the unit-normalized rectified
//! projections of the two features) and a distance term
//! `sigmoid(ψ[SPD(i, j)])`. Both terms lie in `(0, 1]`, so every entry does too.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::episode::Episode;
use crate::error::{GlitterError, Result};
use crate::graph::{bfs_spd, spd_submatrix, sum_spd_to_targets, Graph, NodeId, UNREACHABLE};

/// Floor applied to activation norms before normalizing.
pub const NORM_EPS: f64 = 1e-8;

/// `V_l`: every node within `h` hops of some support node (supports included).
pub fn local_sample(graph: &Graph, support: &[NodeId], h: u32) -> Result<BTreeSet<NodeId>> {
    let mut out = BTreeSet::new();
    for &s in support {
        let d = bfs_spd(graph, s)?;
        out.extend(
            d.dist
                .iter()
                .enumerate()
                .filter(|(_, &dist)| dist != UNREACHABLE && dist <= h)
                .map(|(v, _)| v),
        );
    }
    Ok(out)
}

/// `V_c`: per class, the `c` candidates with the smallest summed SPD to that
/// class's support nodes (ties by node id). Candidates that cannot reach every
/// support node of the class are never picked.
pub fn common_sample(
    graph: &Graph,
    support_by_class: &[Vec<NodeId>],
    c: usize,
    exclude: &BTreeSet<NodeId>,
) -> Result<BTreeSet<NodeId>> {
    let mut out = BTreeSet::new();
    if c == 0 {
        return Ok(out);
    }
    for class_support in support_by_class {
        let sums = sum_spd_to_targets(graph, class_support)?;
        let mut ranked: Vec<(f64, NodeId)> = sums
            .into_iter()
            .enumerate()
            .filter(|(v, s)| s.is_finite() && !exclude.contains(v))
            .map(|(v, s)| (s, v))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(ranked.into_iter().take(c).map(|(_, v)| v));
    }
    Ok(out)
}

/// Node set `V_T` of one meta-task plus everything the losses need to know
/// about its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStructure {
    /// Original node ids: supports (slot-major), then queries, then sampled nodes.
    pub node_list: Vec<NodeId>,
    pub spd: DMatrix<u32>,
    pub adjacency: Option<DMatrix<f64>>,
    pub support_index: Vec<usize>,
    pub support_slots: Vec<usize>,
    pub query_index: Vec<usize>,
    pub query_slots: Vec<usize>,
    pub n_way: usize,
}

impl TaskStructure {
    pub fn len(&self) -> usize {
        self.node_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_list.is_empty()
    }

    /// Row indices of the support nodes of each slot.
    pub fn class_rows(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_way];
        for (&row, &slot) in self.support_index.iter().zip(&self.support_slots) {
            out[slot].push(row);
        }
        out
    }

    /// Builds a task directly from a node list; used for tests and oracles
    /// where no episode exists. The first `support_slots.len()` rows are
    /// supports, the following `query_slots.len()` rows are queries.
    pub fn from_parts(
        graph: &Graph,
        node_list: Vec<NodeId>,
        support_slots: Vec<usize>,
        query_slots: Vec<usize>,
        n_way: usize,
    ) -> Result<Self> {
        let ns = support_slots.len();
        let nq = query_slots.len();
        if ns + nq > node_list.len() {
            return Err(GlitterError::arg("more labeled rows than nodes"));
        }
        if support_slots
            .iter()
            .chain(&query_slots)
            .any(|&s| s >= n_way)
        {
            return Err(GlitterError::arg("slot index out of range"));
        }
        let spd = spd_submatrix(graph, &node_list)?;
        Ok(Self {
            node_list,
            spd,
            adjacency: None,
            support_index: (0..ns).collect(),
            support_slots,
            query_index: (ns..ns + nq).collect(),
            query_slots,
            n_way,
        })
    }
}

pub fn assemble_task_nodes(
    graph: &Graph,
    episode: &Episode,
    h: u32,
    c: usize,
) -> Result<TaskStructure> {
    if episode.graph_id != graph.id() {
        return Err(GlitterError::arg(format!(
            "episode is from graph {}, got graph {}",
            episode.graph_id,
            graph.id()
        )));
    }
    let support = episode.support_nodes();
    let labeled: BTreeSet<NodeId> = support.iter().chain(&episode.query).copied().collect();
    let mut extra = local_sample(graph, &support, h)?;
    extra.extend(common_sample(graph, &episode.support, c, &labeled)?);

    let mut node_list = support.clone();
    node_list.extend(&episode.query);
    node_list.extend(extra.into_iter().filter(|v| !labeled.contains(v)));
    TaskStructure::from_parts(
        graph,
        node_list,
        episode.support_slots(),
        episode.query_slots.clone(),
        episode.n_way(),
    )
}

/// Learnable parameters of the edge-weight functions.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureParams {
    /// `d_a × d`
    pub w1: DMatrix<f64>,
    /// `d_a × d`
    pub w2: DMatrix<f64>,
    /// One entry per SPD bucket `0..=d_max`, plus a final overflow/unreachable bucket.
    pub psi: DVector<f64>,
}

impl StructureParams {
    /// Gaussian projections with std `1/√d`; `ψ(b) = 1 - b`.
    pub fn init<R: Rng>(feature_dim: usize, d_a: usize, d_max: usize, rng: &mut R) -> Self {
        let std = 1.0 / (feature_dim as f64).sqrt();
        let mut gauss = |_, _| std * rng.sample::<f64, _>(StandardNormal);
        let w1 = DMatrix::from_fn(d_a, feature_dim, &mut gauss);
        let w2 = DMatrix::from_fn(d_a, feature_dim, &mut gauss);
        let psi = DVector::from_fn(d_max + 2, |b, _| 1.0 - b as f64);
        Self { w1, w2, psi }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            psi: DVector::zeros(self.psi.len()),
        }
    }

    pub fn d_max(&self) -> usize {
        self.psi.len() - 2
    }

    pub fn bucket(&self, spd: u32) -> usize {
        let d_max = self.d_max();
        if spd == UNREACHABLE || spd as usize > d_max {
            d_max + 1
        } else {
            spd as usize
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rectified_unit(w: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let act: Vec<f64> = w
        .row_iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect();
    let norm = act.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    act.into_iter().map(|v| v / norm).collect()
}

/// Representation-based edge weight for a single ordered pair.
pub fn repr_edge_weight(x_i: &[f64], x_j: &[f64], params: &StructureParams) -> f64 {
    let u = rectified_unit(&params.w1, x_i);
    let v = rectified_unit(&params.w2, x_j);
    let dist = u
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    (-dist).exp()
}

/// Distance-based edge weight; distances past `d_max` share the overflow bucket.
pub fn struct_edge_weight(spd: u32, params: &StructureParams) -> f64 {
    sigmoid(params.psi[params.bucket(spd)])
}

/// Intermediate values of [`build_adjacency`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdjacencyForward {
    pub adjacency: DMatrix<f64>,
    repr: DMatrix<f64>,
    dist_term: DMatrix<f64>,
    buckets: DMatrix<usize>,
    pre_src: DMatrix<f64>,
    pre_dst: DMatrix<f64>,
    unit_src: DMatrix<f64>,
    unit_dst: DMatrix<f64>,
    norm_src: Vec<f64>,
    norm_dst: Vec<f64>,
    pair_dist: DMatrix<f64>,
    psi_len: usize,
}

fn unit_rows(pre: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut unit = pre.map(|v| v.max(0.0));
    let mut norms = Vec::with_capacity(unit.nrows());
    for mut row in unit.row_iter_mut() {
        let n = row.norm().max(NORM_EPS);
        row /= n;
        norms.push(n);
    }
    (unit, norms)
}

/// Dense `|V_T| × |V_T|` adjacency, diagonal included.
pub fn build_adjacency(
    task: &TaskStructure,
    x_t: &DMatrix<f64>,
    params: &StructureParams,
) -> Result<AdjacencyForward> {
    let n = task.len();
    if x_t.nrows() != n || x_t.ncols() != params.w1.ncols() {
        return Err(GlitterError::arg(format!(
            "feature block {}x{} does not match task of {n} nodes and W1 {}x{}",
            x_t.nrows(),
            x_t.ncols(),
            params.w1.nrows(),
            params.w1.ncols()
        )));
    }
    let pre_src = x_t * params.w1.transpose();
    let pre_dst = x_t * params.w2.transpose();
    let (unit_src, norm_src) = unit_rows(&pre_src);
    let (unit_dst, norm_dst) = unit_rows(&pre_dst);

    let da = unit_src.ncols();
    let mut pair_dist = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..da {
                let diff = unit_src[(i, k)] - unit_dst[(j, k)];
                acc += diff * diff;
            }
            pair_dist[(i, j)] = acc.sqrt();
        }
    }
    let repr = pair_dist.map(|d: f64| (-d).exp());
    let buckets = task.spd.map(|s| params.bucket(s));
    let dist_term = buckets.map(|b| sigmoid(params.psi[b]));
    let adjacency = (&repr + &dist_term) * 0.5;
    Ok(AdjacencyForward {
        adjacency,
        repr,
        dist_term,
        buckets,
        pre_src,
        pre_dst,
        unit_src,
        unit_dst,
        norm_src,
        norm_dst,
        pair_dist,
        psi_len: params.psi.len(),
    })
}

/// Backward through unit normalization and the rectifier to the projection input.
fn unit_rows_backward(
    pre: &DMatrix<f64>,
    unit: &DMatrix<f64>,
    norms: &[f64],
    g_unit: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut g_pre = DMatrix::zeros(pre.nrows(), pre.ncols());
    for i in 0..pre.nrows() {
        let n = norms[i];
        let raw_norm = unit.row(i).norm() * n;
        let dot = if raw_norm > NORM_EPS {
            unit.row(i).dot(&g_unit.row(i))
        } else {
            0.0
        };
        for k in 0..pre.ncols() {
            if pre[(i, k)] > 0.0 {
                g_pre[(i, k)] = (g_unit[(i, k)] - unit[(i, k)] * dot) / n;
            }
        }
    }
    g_pre
}

/// Gradient of a scalar w.r.t. the structure parameters given `∂L/∂A`.
pub fn adjacency_backward(
    fwd: &AdjacencyForward,
    x_t: &DMatrix<f64>,
    g_adj: &DMatrix<f64>,
) -> StructureParams {
    let n = g_adj.nrows();
    let mut g_psi = DVector::zeros(fwd.psi_len);
    let mut g_unit_src = DMatrix::zeros(fwd.unit_src.nrows(), fwd.unit_src.ncols());
    let mut g_unit_dst = DMatrix::zeros(fwd.unit_dst.nrows(), fwd.unit_dst.ncols());
    let da = fwd.unit_src.ncols();
    for j in 0..n {
        for i in 0..n {
            let g = 0.5 * g_adj[(i, j)];
            let s = fwd.dist_term[(i, j)];
            g_psi[fwd.buckets[(i, j)]] += g * s * (1.0 - s);

            let d = fwd.pair_dist[(i, j)];
            if d > 0.0 {
                let coef = -g * fwd.repr[(i, j)] / d;
                for k in 0..da {
                    let diff = fwd.unit_src[(i, k)] - fwd.unit_dst[(j, k)];
                    g_unit_src[(i, k)] += coef * diff;
                    g_unit_dst[(j, k)] -= coef * diff;
                }
            }
        }
    }
    let g_pre_src = unit_rows_backward(&fwd.pre_src, &fwd.unit_src, &fwd.norm_src, &g_unit_src);
    let g_pre_dst = unit_rows_backward(&fwd.pre_dst, &fwd.unit_dst, &fwd.norm_dst, &g_unit_dst);
    StructureParams {
        w1: g_pre_src.transpose() * x_t,
        w2: g_pre_dst.transpose() * x_t,
        psi: g_psi,
    }
}
