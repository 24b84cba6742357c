//! Self-contained oracle suites behind `glitter verify`. Each check compares
//! the production code path against an independent brute-force computation.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::influence::{
    build_absorbing_chain, class_influence_loss, exact_absorbing_probs, geometric_mean_influence,
    truncated_absorbing_probs,
};
use crate::mi::{mutual_info_loss, QueryClassDistribution};
use crate::model::{cross_entropy, DropoutMask, EncoderParams};
use crate::objective::{compute_gradients, loss_value, Groups, LossKind, ParamSet, TaskContext};
use crate::structure::{
    build_adjacency, common_sample, local_sample, StructureParams, TaskStructure,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Suite {
    Theorems,
    Gradients,
    Sampling,
}

impl std::str::FromStr for Suite {
    type Err = crate::GlitterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorems" => Ok(Suite::Theorems),
            "gradients" => Ok(Suite::Gradients),
            "sampling" => Ok(Suite::Sampling),
            other => Err(crate::GlitterError::arg(format!(
                "unknown suite `{other}` (expected theorems, gradients or sampling)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    /// Report-only lines that never affect the verdict.
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        for n in &self.notes {
            writeln!(f, "[note] {n}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: &Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Theorems => theorems(seed),
        Suite::Gradients => gradients(seed),
        Suite::Sampling => sampling(seed),
    }
}

/// Random strictly positive adjacency with `supports` absorbing states in
/// rows `0..supports`.
pub fn random_chain_instance<R: Rng>(rng: &mut R) -> (DMatrix<f64>, Vec<usize>) {
    let s = rng.random_range(2..=5);
    let n = rng.random_range(s + 1..=20);
    let a = DMatrix::from_fn(n, n, |_, _| 1.0 - rng.random::<f64>());
    (a, (0..s).collect())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn theorems(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_power = 0.0f64;
    let mut worst_b50 = 0.0f64;
    let mut monotone = true;
    let mut bounded = true;
    let mut tail_ok = true;
    let mut tail_checked = 0;
    for _ in 0..30 {
        let (a, sup) = random_chain_instance(&mut rng);
        let chain = build_absorbing_chain(&a, &sup)?;
        let b = exact_absorbing_probs(&chain)?;

        // Linear propagation: rows of Ã^L restricted to transient→absorbing.
        let mut power = DMatrix::identity(a.nrows(), a.nrows());
        for _ in 0..200 {
            power = &power * &chain.a_tilde;
        }
        let lin = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| {
            power[(chain.non_absorbing[i], chain.absorbing[j])]
        });
        worst_power = worst_power.max(max_abs(&(lin - &b)));

        let mut prev = truncated_absorbing_probs(&chain, 0);
        for m in 1..=50 {
            let cur = truncated_absorbing_probs(&chain, m);
            monotone &= cur.iter().zip(prev.iter()).all(|(c, p)| *c >= *p - 1e-15);
            bounded &= cur.iter().zip(b.iter()).all(|(c, e)| *c <= *e + 1e-12);
            prev = cur;
        }
        worst_b50 = worst_b50.max(max_abs(&(prev - &b)));

        let rho = chain
            .q_block
            .row_iter()
            .map(|r| r.sum())
            .fold(0.0, f64::max);
        if rho <= 0.9 {
            tail_checked += 1;
            let e2 = max_abs(&(truncated_absorbing_probs(&chain, 2) - &b));
            let e5 = max_abs(&(truncated_absorbing_probs(&chain, 5) - &b));
            tail_ok &= e5 <= rho.powi(3) * e2 + 1e-15;
        }
    }
    rep.push(
        "linear propagation at L=200 equals absorption probabilities",
        worst_power < 1e-6,
        format!("max abs error {worst_power:.2e} over 30 chains"),
    );
    rep.push(
        "truncated estimate monotone in m",
        monotone,
        "m = 0..50".into(),
    );
    rep.push(
        "truncated estimate bounded by exact",
        bounded,
        "m = 0..50".into(),
    );
    rep.push(
        "truncated estimate at m=50 within 1e-8",
        worst_b50 < 1e-8,
        format!("max abs error {worst_b50:.2e}"),
    );
    rep.push(
        "error ratio m=5 vs m=2 within geometric tail",
        tail_ok,
        format!("{tail_checked} chains with Q row sums <= 0.9"),
    );

    // Analytic loss values.
    let h = DMatrix::from_element(5, 3, 0.7);
    let ln = class_influence_loss(&h, &[vec![0, 1, 2]])?;
    rep.push(
        "influence loss, identical representations",
        (ln - 1.5).abs() < 1e-9,
        format!("{ln} (expected 1.5)"),
    );
    for n in [2usize, 3, 5] {
        let uniform = QueryClassDistribution {
            probs: DMatrix::from_element(n, n, 1.0 / n as f64),
            fallback_rows: vec![],
            normalized: true,
        };
        let one_hot = QueryClassDistribution {
            probs: DMatrix::identity(n, n),
            fallback_rows: vec![],
            normalized: true,
        };
        let u = mutual_info_loss(&uniform)?;
        let o = mutual_info_loss(&one_hot)?;
        let ce = cross_entropy(&uniform.probs, &[0], &[n - 1])?;
        rep.push(
            &format!("MI loss and cross-entropy analytic values, N={n}"),
            u.abs() < 1e-9
                && (o + (n as f64).ln()).abs() < 1e-9
                && (ce - (n as f64).ln()).abs() < 1e-9,
            format!("uniform {u:.2e}, one-hot {o:.6}, cross-entropy {ce:.6}"),
        );
    }

    // Invariant sweep on random learned adjacencies.
    let mut entries_ok = true;
    let mut rows_ok = true;
    for i in 0..1000 {
        let (task, x, p) = random_task(&mut rng, 6 + i % 12, 4)?;
        let adj = build_adjacency(&task, &x, &p.structure)?.adjacency;
        entries_ok &= adj.iter().all(|&v| v > 0.0 && v <= 1.0);
        let chain = build_absorbing_chain(&adj, &task.support_index)?;
        for (i, row) in chain.a_tilde.row_iter().enumerate() {
            rows_ok &= (row.sum() - 1.0).abs() < 1e-12;
            if task.support_index.contains(&i) {
                rows_ok &= row[i] == 1.0 && row.iter().filter(|&&v| v != 0.0).count() == 1;
            }
        }
    }
    rep.push(
        "learned adjacency entries in (0, 1]",
        entries_ok,
        "1000 random tasks".into(),
    );
    rep.push(
        "chain rows stochastic, absorbing rows one-hot",
        rows_ok,
        "1000 random tasks".into(),
    );

    // Sampling rationale diagnostic: influence of near vs far nodes on supports.
    let (task, x, p) = random_task(&mut rng, 14, 4)?;
    let adj = build_adjacency(&task, &x, &p.structure)?.adjacency;
    let chain = build_absorbing_chain(&adj, &task.support_index)?;
    let b = exact_absorbing_probs(&chain)?;
    let cols: Vec<usize> = (0..task.support_index.len()).collect();
    let mut near = Vec::new();
    let mut far = Vec::new();
    for (row, &node) in chain.non_absorbing.iter().enumerate() {
        let gm = geometric_mean_influence(&b, row, &cols)?.value;
        let min_spd = task
            .support_index
            .iter()
            .map(|&s| task.spd[(node, s)])
            .min()
            .unwrap_or(u32::MAX);
        if min_spd <= 1 {
            near.push(gm);
        } else {
            far.push(gm);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    rep.notes.push(format!(
        "geometric-mean influence on supports: nodes within 1 hop {:.4} (n={}), farther {:.4} (n={})",
        mean(&near),
        near.len(),
        mean(&far),
        far.len()
    ));
    Ok(rep)
}

/// Random connected-ish graph task with the first rows as supports of two
/// classes and the next two rows as queries.
pub fn random_task<R: Rng>(
    rng: &mut R,
    n: usize,
    d: usize,
) -> Result<(TaskStructure, DMatrix<f64>, ParamSet)> {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    for _ in 0..n / 2 {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v {
            edges.push((u, v));
        }
    }
    let graph = Graph::new(0, edges, x.clone(), vec![None; n])?;
    let task =
        TaskStructure::from_parts(&graph, (0..n).collect(), vec![0, 0, 1, 1], vec![0, 1], 2)?;
    let params = ParamSet {
        structure: StructureParams::init(d, 3, 3, rng),
        encoder: EncoderParams::init(d, 5, 2, rng),
    };
    Ok((task, x, params))
}

/// Worst relative error of analytic vs central-difference gradients.
pub fn gradient_error(
    kind: LossKind,
    ctx: &TaskContext,
    params: &ParamSet,
    step: f64,
) -> Result<f64> {
    let analytic = compute_gradients(kind, ctx, params, Groups::ALL)?
        .grads
        .flatten();
    let flat = params.flatten();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut shifted = flat.clone();
        shifted[i] = flat[i] + step;
        probe.unflatten(&shifted)?;
        let hi = loss_value(kind, ctx, &probe)?;
        shifted[i] = flat[i] - step;
        probe.unflatten(&shifted)?;
        let lo = loss_value(kind, ctx, &probe)?;
        let fd = (hi - lo) / (2.0 * step);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradients(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        LossKind::Influence,
        LossKind::MutualInfo,
        LossKind::Structure,
        LossKind::Support,
        LossKind::Query,
    ];
    let mut worst = [0.0f64; 5];
    for _ in 0..5 {
        let (task, x, params) = random_task(&mut rng, 6, 3)?;
        let mask = DropoutMask::sample(6, params.encoder.hidden_dim(), 0.5, &mut rng);
        let ctx = TaskContext {
            task: &task,
            features: &x,
            truncation: 2,
            normalize_scores: true,
            dropout: Some(&mask),
        };
        for (w, kind) in worst.iter_mut().zip(kinds) {
            *w = w.max(gradient_error(kind, &ctx, &params, 1e-5)?);
        }
    }
    for (w, kind) in worst.iter().zip(kinds) {
        rep.push(
            &format!("{kind:?} gradient vs central differences"),
            *w < 1e-4,
            format!("max relative error {w:.2e} over 5 random 6-node tasks"),
        );
    }
    Ok(rep)
}

/// All-pairs distances by Floyd–Warshall; `None` means unreachable.
pub fn floyd_warshall(graph: &Graph) -> Vec<Vec<Option<u32>>> {
    let n = graph.node_count();
    let mut d = vec![vec![None; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = Some(0);
    }
    for &(u, v) in graph.edges() {
        d[u][v] = Some(1);
        d[v][u] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

fn random_graph<R: Rng>(rng: &mut R) -> Result<Graph> {
    let n = rng.random_range(5..=25);
    let p = rng.random_range(0.05..0.3);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(0, edges, DMatrix::zeros(n, 1), vec![None; n])
}

fn sampling(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut local_ok = 0;
    let mut common_ok = 0;
    for _ in 0..50 {
        let g = random_graph(&mut rng)?;
        let n = g.node_count();
        let fw = floyd_warshall(&g);
        let mut nodes: Vec<NodeId> = (0..n).collect();
        for i in (1..n).rev() {
            nodes.swap(i, rng.random_range(0..=i));
        }
        let support: Vec<NodeId> = nodes[..4].to_vec();
        let query: Vec<NodeId> = nodes[4..5].to_vec();
        let h = rng.random_range(0..=3u32);

        let brute: BTreeSet<NodeId> = (0..n)
            .filter(|&v| support.iter().any(|&s| fw[s][v].is_some_and(|d| d <= h)))
            .collect();
        if local_sample(&g, &support, h)? == brute {
            local_ok += 1;
        }

        let by_class = vec![support[..2].to_vec(), support[2..].to_vec()];
        let exclude: BTreeSet<NodeId> = support.iter().chain(&query).copied().collect();
        let c = rng.random_range(1..=4);
        let mut expected = BTreeSet::new();
        for class in &by_class {
            let mut ranked: Vec<(u32, NodeId)> = (0..n)
                .filter(|v| !exclude.contains(v))
                .filter_map(|v| {
                    class
                        .iter()
                        .map(|&s| fw[v][s])
                        .sum::<Option<u32>>()
                        .map(|total| (total, v))
                })
                .collect();
            ranked.sort();
            expected.extend(ranked.into_iter().take(c).map(|(_, v)| v));
        }
        if common_sample(&g, &by_class, c, &exclude)? == expected {
            common_ok += 1;
        }
    }
    rep.push(
        "local sampling equals brute-force h-ball union",
        local_ok == 50,
        format!("{local_ok}/50 random graphs"),
    );
    rep.push(
        "common sampling equals exhaustive top-C by summed distance",
        common_ok == 50,
        format!("{common_ok}/50 random graphs"),
    );
    Ok(rep)
}
