//! Node influence on a task structure: the absorbing Markov chain whose
//! absorbing states are the support nodes, exact and truncated absorption
//! probabilities, and the within-class influence loss.

use nalgebra::DMatrix;

use crate::error::{GlitterError, Result};
use crate::graph::row_normalize;

/// Floor for `‖h_j‖²` in the influence loss.
pub const SQ_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbingChain {
    /// Task rows of the `t` transient states, in task order.
    pub non_absorbing: Vec<usize>,
    /// Task rows of the absorbing (support) states, in the given support order.
    pub absorbing: Vec<usize>,
    /// Row-stochastic transition matrix in task row order.
    pub a_tilde: DMatrix<f64>,
    /// `t × t` transitions among transient states.
    pub q_block: DMatrix<f64>,
    /// `t × |S|` transitions into absorbing states.
    pub r_block: DMatrix<f64>,
    row_sums: Vec<f64>,
}

impl AbsorbingChain {
    pub fn transient_count(&self) -> usize {
        self.non_absorbing.len()
    }

    /// Transient states first, then absorbing states.
    pub fn ordering(&self) -> Vec<usize> {
        self.non_absorbing
            .iter()
            .chain(&self.absorbing)
            .copied()
            .collect()
    }
}

pub fn build_absorbing_chain(
    adjacency: &DMatrix<f64>,
    support_index: &[usize],
) -> Result<AbsorbingChain> {
    let n = adjacency.nrows();
    if support_index.is_empty() {
        return Err(GlitterError::arg(
            "absorbing chain needs at least one support state",
        ));
    }
    let mut is_absorbing = vec![false; n];
    for &s in support_index {
        if s >= n {
            return Err(GlitterError::arg(format!(
                "support row {s} out of range for {n} states"
            )));
        }
        is_absorbing[s] = true;
    }
    let mut a_tilde = row_normalize(adjacency)?;
    for &s in support_index {
        a_tilde.row_mut(s).fill(0.0);
        a_tilde[(s, s)] = 1.0;
    }
    let non_absorbing: Vec<usize> = (0..n).filter(|&i| !is_absorbing[i]).collect();
    let absorbing = support_index.to_vec();
    let q_block = DMatrix::from_fn(non_absorbing.len(), non_absorbing.len(), |i, j| {
        a_tilde[(non_absorbing[i], non_absorbing[j])]
    });
    let r_block = DMatrix::from_fn(non_absorbing.len(), absorbing.len(), |i, j| {
        a_tilde[(non_absorbing[i], absorbing[j])]
    });
    let row_sums = non_absorbing
        .iter()
        .map(|&i| adjacency.row(i).sum())
        .collect();
    Ok(AbsorbingChain {
        non_absorbing,
        absorbing,
        a_tilde,
        q_block,
        r_block,
        row_sums,
    })
}

/// Maps gradients on the Q and R blocks back to the raw adjacency.
pub fn chain_backward(
    chain: &AbsorbingChain,
    g_q: &DMatrix<f64>,
    g_r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = chain.a_tilde.nrows();
    let mut g_adj = DMatrix::zeros(n, n);
    let mut g_row = vec![0.0; n];
    for (p, &i) in chain.non_absorbing.iter().enumerate() {
        g_row.fill(0.0);
        for (k, &c) in chain.non_absorbing.iter().enumerate() {
            g_row[c] = g_q[(p, k)];
        }
        for (l, &c) in chain.absorbing.iter().enumerate() {
            g_row[c] = g_r[(p, l)];
        }
        let sum = chain.row_sums[p];
        if sum <= 0.0 {
            continue;
        }
        let dot: f64 = (0..n).map(|c| g_row[c] * chain.a_tilde[(i, c)]).sum();
        for c in 0..n {
            g_adj[(i, c)] = (g_row[c] - dot) / sum;
        }
    }
    g_adj
}

/// `B = (I - Q)⁻¹ R` by dense LU.
pub fn exact_absorbing_probs(chain: &AbsorbingChain) -> Result<DMatrix<f64>> {
    let t = chain.transient_count();
    if t == 0 {
        return Ok(DMatrix::zeros(0, chain.absorbing.len()));
    }
    let system = DMatrix::identity(t, t) - &chain.q_block;
    let lu = system.clone().lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if lo.is_nan() || lo <= f64::EPSILON * hi.max(1.0) {
        return Err(GlitterError::Numerical(format!(
            "I - Q is singular (pivot ratio estimate {cond:.3e})"
        )));
    }
    lu.solve(&chain.r_block).ok_or_else(|| {
        GlitterError::Numerical(format!(
            "I - Q is singular (pivot ratio estimate {cond:.3e})"
        ))
    })
}

/// Horner iterates `Y_0 = R`, `Y_k = R + Q Y_{k-1}` so `Y_m = Σ_{h≤m} Qʰ R`.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub probs: DMatrix<f64>,
    iterates: Vec<DMatrix<f64>>,
}

pub fn truncated_forward(chain: &AbsorbingChain, m: usize) -> Truncation {
    let mut iterates = Vec::with_capacity(m + 1);
    let mut y = chain.r_block.clone();
    for _ in 0..m {
        let next = &chain.r_block + &chain.q_block * &y;
        iterates.push(y);
        y = next;
    }
    Truncation { probs: y, iterates }
}

pub fn truncated_absorbing_probs(chain: &AbsorbingChain, m: usize) -> DMatrix<f64> {
    truncated_forward(chain, m).probs
}

/// Returns `(∂L/∂Q, ∂L/∂R)` given `∂L/∂B̃`.
pub fn truncated_backward(
    chain: &AbsorbingChain,
    trunc: &Truncation,
    g_probs: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = chain.transient_count();
    let mut g_q = DMatrix::zeros(t, t);
    let mut g_r = DMatrix::zeros(t, chain.absorbing.len());
    let mut g_y = g_probs.clone();
    for prev in trunc.iterates.iter().rev() {
        g_r += &g_y;
        g_q += &g_y * prev.transpose();
        g_y = chain.q_block.transpose() * g_y;
    }
    g_r += g_y;
    (g_q, g_r)
}

fn check_rows(h: &DMatrix<f64>, class_rows: &[Vec<usize>]) -> Result<()> {
    if h.nrows() <= 1 {
        return Err(GlitterError::arg(
            "influence loss needs at least two task nodes",
        ));
    }
    if class_rows.is_empty() {
        return Err(GlitterError::arg("influence loss needs at least one class"));
    }
    let mut seen = vec![false; h.nrows()];
    for &r in class_rows.iter().flatten() {
        if r >= h.nrows() || seen[r] {
            return Err(GlitterError::arg(format!(
                "class row {r} invalid or repeated"
            )));
        }
        seen[r] = true;
    }
    Ok(())
}

/// Within-class influence loss `L_N` and its gradient w.r.t. the representation rows.
///
/// For class `C` of size `K` and task size `n`, node `j ∈ C` contributes
/// `h_jᵀ s_j / max(‖h_j‖², ε)` where
/// `s_j = (K-2)/(n-1) Σ_{i∈C∖j} h_i - (K-1)/(n-1) Σ_{k∉C} h_k`;
/// the loss is minus the class-averaged sum of these terms.
pub fn class_influence_loss_grad(
    h: &DMatrix<f64>,
    class_rows: &[Vec<usize>],
) -> Result<(f64, DMatrix<f64>)> {
    check_rows(h, class_rows)?;
    let n = h.nrows();
    let dim = h.ncols();
    let scale = -1.0 / class_rows.len() as f64;
    let total = h.row_sum();
    let mut loss = 0.0;
    let mut g = DMatrix::zeros(n, dim);

    for rows in class_rows {
        let k = rows.len() as f64;
        let a = (k - 2.0) / (n as f64 - 1.0);
        let b = (k - 1.0) / (n as f64 - 1.0);
        let mut in_class = vec![false; n];
        let mut class_sum = nalgebra::RowDVector::zeros(dim);
        for &r in rows {
            in_class[r] = true;
            class_sum += h.row(r);
        }
        let outside = &total - &class_sum;
        // Σ_j h_j / g_j over the class, for the cross terms
        let mut unit_sum = nalgebra::RowDVector::zeros(dim);
        let mut units = Vec::with_capacity(rows.len());
        for &j in rows {
            let hj = h.row(j);
            let sq = hj.norm_squared();
            let gj = sq.max(SQ_NORM_EPS);
            let s = (&class_sum - hj) * a - &outside * b;
            let dot = hj.dot(&s);
            loss += scale * dot / gj;

            let mut own = &s / gj;
            if sq > SQ_NORM_EPS {
                own -= hj * (2.0 * dot / (gj * gj));
            }
            let mut row = g.row_mut(j);
            row += own * scale;
            let u = hj / gj;
            unit_sum += &u;
            units.push(u);
        }
        for (r, &member) in in_class.iter().enumerate() {
            let contrib = if member {
                let pos = rows.iter().position(|&x| x == r).unwrap();
                (&unit_sum - &units[pos]) * a
            } else {
                &unit_sum * (-b)
            };
            let mut row = g.row_mut(r);
            row += contrib * scale;
        }
    }
    Ok((loss, g))
}

pub fn class_influence_loss(h: &DMatrix<f64>, class_rows: &[Vec<usize>]) -> Result<f64> {
    class_influence_loss_grad(h, class_rows).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricMean {
    pub value: f64,
    /// Set when some influence was zero; `value` is then 0.
    pub has_zero: bool,
}

/// `(Π_j I(v, s_j))^{1/K}` over the support states of one class, in log space.
pub fn geometric_mean_influence(
    influence: &DMatrix<f64>,
    row: usize,
    class_cols: &[usize],
) -> Result<GeometricMean> {
    if class_cols.is_empty() || row >= influence.nrows() {
        return Err(GlitterError::arg(
            "geometric mean needs a valid row and a nonempty class",
        ));
    }
    let mut log_sum = 0.0;
    for &c in class_cols {
        let v = influence[(row, c)];
        if v <= 0.0 {
            return Ok(GeometricMean {
                value: 0.0,
                has_zero: true,
            });
        }
        log_sum += v.ln();
    }
    Ok(GeometricMean {
        value: (log_sum / class_cols.len() as f64).exp(),
        has_zero: false,
    })
}
