//! Query class probabilities from truncated absorption and the transductive
//! mutual-information loss built on them.

use nalgebra::DMatrix;

use crate::error::{GlitterError, Result};

/// Clipping floor applied before logarithms.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryClassDistribution {
    /// `|Q| × N`
    pub probs: DMatrix<f64>,
    /// Query rows whose raw scores summed to zero and fell back to uniform.
    pub fallback_rows: Vec<usize>,
    pub normalized: bool,
}

/// Per-query class scores: absorption mass summed over each class's support
/// states, clipped at [`PROB_EPS`], then (optionally) normalized across classes.
///
/// `absorbing_slots[s]` is the slot of absorbing column `s`; `query_rows` are
/// rows of `b_tilde`.
pub fn query_class_distribution(
    b_tilde: &DMatrix<f64>,
    absorbing_slots: &[usize],
    query_rows: &[usize],
    n_way: usize,
    normalize: bool,
) -> Result<QueryClassDistribution> {
    if absorbing_slots.len() != b_tilde.ncols() {
        return Err(GlitterError::arg(format!(
            "{} slot tags for {} absorbing states",
            absorbing_slots.len(),
            b_tilde.ncols()
        )));
    }
    if absorbing_slots.iter().any(|&s| s >= n_way)
        || query_rows.iter().any(|&r| r >= b_tilde.nrows())
    {
        return Err(GlitterError::arg("slot or query row out of range"));
    }
    let raw = class_scores(b_tilde, absorbing_slots, query_rows, n_way);
    let mut probs = DMatrix::zeros(query_rows.len(), n_way);
    let mut fallback_rows = Vec::new();
    for q in 0..query_rows.len() {
        if raw.row(q).sum() <= 0.0 {
            fallback_rows.push(q);
            probs.row_mut(q).fill(1.0 / n_way as f64);
            continue;
        }
        let clipped = raw.row(q).map(|v| v.max(PROB_EPS));
        let z = if normalize { clipped.sum() } else { 1.0 };
        probs.set_row(q, &(clipped / z));
    }
    Ok(QueryClassDistribution {
        probs,
        fallback_rows,
        normalized: normalize,
    })
}

fn class_scores(
    b_tilde: &DMatrix<f64>,
    slots: &[usize],
    rows: &[usize],
    n_way: usize,
) -> DMatrix<f64> {
    let mut raw = DMatrix::zeros(rows.len(), n_way);
    for (q, &r) in rows.iter().enumerate() {
        for (s, &slot) in slots.iter().enumerate() {
            raw[(q, slot)] += b_tilde[(r, s)];
        }
    }
    raw
}

/// Maps `∂L/∂probs` back to `∂L/∂B̃` (rows not in `query_rows` get zero).
pub fn query_class_distribution_backward(
    b_tilde: &DMatrix<f64>,
    dist: &QueryClassDistribution,
    absorbing_slots: &[usize],
    query_rows: &[usize],
    g_probs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n_way = dist.probs.ncols();
    let raw = class_scores(b_tilde, absorbing_slots, query_rows, n_way);
    let mut g_b = DMatrix::zeros(b_tilde.nrows(), b_tilde.ncols());
    for (q, &r) in query_rows.iter().enumerate() {
        if dist.fallback_rows.contains(&q) {
            continue;
        }
        let g_clipped: Vec<f64> = if dist.normalized {
            let z: f64 = raw.row(q).iter().map(|v| v.max(PROB_EPS)).sum();
            let dot: f64 = (0..n_way)
                .map(|c| g_probs[(q, c)] * dist.probs[(q, c)])
                .sum();
            (0..n_way).map(|c| (g_probs[(q, c)] - dot) / z).collect()
        } else {
            (0..n_way).map(|c| g_probs[(q, c)]).collect()
        };
        for (s, &slot) in absorbing_slots.iter().enumerate() {
            if raw[(q, slot)] > PROB_EPS {
                g_b[(r, s)] += g_clipped[slot];
            }
        }
    }
    g_b
}

/// Negative mutual information between queries and their predicted labels:
/// `Σ_j p̄_j ln p̄_j - (1/|Q|) Σ_i Σ_j p_ij ln p_ij`.
pub fn mutual_info_loss(dist: &QueryClassDistribution) -> Result<f64> {
    for (i, row) in dist.probs.row_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-9 {
            return Err(GlitterError::arg(format!(
                "query row {i} sums to {}, expected 1",
                row.sum()
            )));
        }
    }
    Ok(mutual_info_loss_grad(&dist.probs).0)
}

/// Loss value and `∂L/∂p` without the normalization check; used for
/// unnormalized ablation runs too.
pub fn mutual_info_loss_grad(probs: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let nq = probs.nrows();
    let n_way = probs.ncols();
    if nq == 0 {
        return (0.0, DMatrix::zeros(0, n_way));
    }
    let inv = 1.0 / nq as f64;
    let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
    let marginal: Vec<f64> = (0..n_way).map(|j| probs.column(j).sum() * inv).collect();
    let marginal_term: f64 = marginal.iter().map(|&p| xlogx(p)).sum();
    let conditional: f64 = probs.iter().map(|&p| xlogx(p)).sum::<f64>() * inv;
    let loss = marginal_term - conditional;

    let grad = DMatrix::from_fn(nq, n_way, |i, j| {
        let p = probs[(i, j)];
        let lm = if marginal[j] > 0.0 {
            marginal[j].ln()
        } else {
            0.0
        };
        let lp = if p > 0.0 { p.ln() } else { 0.0 };
        inv * (lm - lp)
    });
    (loss, grad)
}
