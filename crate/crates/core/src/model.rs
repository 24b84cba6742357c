//! Two-layer GCN encoder over the task structure, the slot classifier and the
//! supervised loss, each with its hand-derived backward pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{GlitterError, Result};
use crate::graph::row_normalize;

/// Floor inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `d × hidden`
    pub gcn_w1: DMatrix<f64>,
    /// `hidden × hidden`
    pub gcn_w2: DMatrix<f64>,
    /// `hidden × N`
    pub clf_w: DMatrix<f64>,
    /// `N`
    pub clf_b: DVector<f64>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

impl EncoderParams {
    pub fn init<R: Rng>(feature_dim: usize, hidden: usize, n_way: usize, rng: &mut R) -> Self {
        Self {
            gcn_w1: glorot(feature_dim, hidden, rng),
            gcn_w2: glorot(hidden, hidden, rng),
            clf_w: glorot(hidden, n_way, rng),
            clf_b: DVector::zeros(n_way),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gcn_w1: DMatrix::zeros(self.gcn_w1.nrows(), self.gcn_w1.ncols()),
            gcn_w2: DMatrix::zeros(self.gcn_w2.nrows(), self.gcn_w2.ncols()),
            clf_w: DMatrix::zeros(self.clf_w.nrows(), self.clf_w.ncols()),
            clf_b: DVector::zeros(self.clf_b.len()),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gcn_w1.ncols()
    }
}

/// Inverted-dropout multipliers for the first hidden layer: each entry is
/// either 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub DMatrix<f64>);

impl DropoutMask {
    pub fn sample<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
        DropoutMask(DMatrix::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct GcnForward {
    pub a_hat: DMatrix<f64>,
    row_sums: Vec<f64>,
    m1: DMatrix<f64>,
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    m2: DMatrix<f64>,
    /// Output representations, `|V_T| × hidden`.
    pub h: DMatrix<f64>,
}

/// `H = Â · drop(relu(Â X W1)) · W2` with `Â` the row-normalized adjacency.
pub fn gcn_forward(
    adjacency: &DMatrix<f64>,
    x_t: &DMatrix<f64>,
    params: &EncoderParams,
    dropout: Option<&DropoutMask>,
) -> Result<GcnForward> {
    let n = adjacency.nrows();
    if x_t.nrows() != n || x_t.ncols() != params.gcn_w1.nrows() {
        return Err(GlitterError::arg(format!(
            "encoder input {}x{} incompatible with {n} nodes and gcn_W1 {}x{}",
            x_t.nrows(),
            x_t.ncols(),
            params.gcn_w1.nrows(),
            params.gcn_w1.ncols()
        )));
    }
    if let Some(mask) = dropout {
        if mask.0.shape() != (n, params.hidden_dim()) {
            return Err(GlitterError::arg("dropout mask shape mismatch"));
        }
    }
    let a_hat = row_normalize(adjacency)?;
    let row_sums = adjacency.row_iter().map(|r| r.sum()).collect();
    let m1 = &a_hat * x_t;
    let z1 = &m1 * &params.gcn_w1;
    let mut h1 = z1.map(|v| v.max(0.0));
    if let Some(mask) = dropout {
        h1.component_mul_assign(&mask.0);
    }
    let m2 = &a_hat * &h1;
    let h = &m2 * &params.gcn_w2;
    Ok(GcnForward {
        a_hat,
        row_sums,
        m1,
        z1,
        h1,
        m2,
        h,
    })
}

pub struct GcnGrads {
    pub gcn_w1: DMatrix<f64>,
    pub gcn_w2: DMatrix<f64>,
    /// Gradient w.r.t. the raw (unnormalized) adjacency, when requested.
    pub adjacency: Option<DMatrix<f64>>,
}

pub fn gcn_backward(
    fwd: &GcnForward,
    x_t: &DMatrix<f64>,
    params: &EncoderParams,
    dropout: Option<&DropoutMask>,
    g_h: &DMatrix<f64>,
    want_adjacency: bool,
) -> GcnGrads {
    let g_w2 = fwd.m2.transpose() * g_h;
    let g_m2 = g_h * params.gcn_w2.transpose();
    let mut g_h1 = fwd.a_hat.transpose() * &g_m2;
    if let Some(mask) = dropout {
        g_h1.component_mul_assign(&mask.0);
    }
    let g_z1 = g_h1.zip_map(&fwd.z1, |g, z| if z > 0.0 { g } else { 0.0 });
    let g_w1 = fwd.m1.transpose() * &g_z1;

    let adjacency = want_adjacency.then(|| {
        let g_m1 = &g_z1 * params.gcn_w1.transpose();
        let g_a_hat = &g_m2 * fwd.h1.transpose() + g_m1 * x_t.transpose();
        let mut g_adj = DMatrix::zeros(g_a_hat.nrows(), g_a_hat.ncols());
        for i in 0..g_a_hat.nrows() {
            let sum = fwd.row_sums[i];
            if sum <= 0.0 {
                continue;
            }
            let dot = g_a_hat.row(i).dot(&fwd.a_hat.row(i));
            for c in 0..g_a_hat.ncols() {
                g_adj[(i, c)] = (g_a_hat[(i, c)] - dot) / sum;
            }
        }
        g_adj
    });
    GcnGrads {
        gcn_w1: g_w1,
        gcn_w2: g_w2,
        adjacency,
    }
}

/// Row-wise softmax of `H · clf_W + clf_b`.
pub fn classify(h: &DMatrix<f64>, params: &EncoderParams) -> DMatrix<f64> {
    let mut logits = h * &params.clf_w;
    for mut row in logits.row_iter_mut() {
        row += params.clf_b.transpose();
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let z = row.sum();
        row /= z;
    }
    logits
}

fn check_labels(probs: &DMatrix<f64>, rows: &[usize], labels: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(GlitterError::arg("cross-entropy over an empty selection"));
    }
    if rows.len() != labels.len() {
        return Err(GlitterError::arg("rows and labels differ in length"));
    }
    if rows.iter().any(|&r| r >= probs.nrows()) || labels.iter().any(|&l| l >= probs.ncols()) {
        return Err(GlitterError::arg(
            "cross-entropy row or slot label out of range",
        ));
    }
    Ok(())
}

/// Summed negative log-likelihood of `labels` over the selected rows.
pub fn cross_entropy(probs: &DMatrix<f64>, rows: &[usize], labels: &[usize]) -> Result<f64> {
    check_labels(probs, rows, labels)?;
    Ok(rows
        .iter()
        .zip(labels)
        .map(|(&r, &l)| -probs[(r, l)].max(LOG_EPS).ln())
        .sum())
}

pub struct ClassifierGrads {
    pub clf_w: DMatrix<f64>,
    pub clf_b: DVector<f64>,
    pub h: DMatrix<f64>,
}

/// Backward of `cross_entropy(classify(h))` to the head and the representations.
pub fn classifier_backward(
    h: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    params: &EncoderParams,
    rows: &[usize],
    labels: &[usize],
) -> ClassifierGrads {
    let mut g_logits = DMatrix::zeros(probs.nrows(), probs.ncols());
    for (&r, &l) in rows.iter().zip(labels) {
        if probs[(r, l)] <= LOG_EPS {
            continue;
        }
        for c in 0..probs.ncols() {
            g_logits[(r, c)] += probs[(r, c)] - if c == l { 1.0 } else { 0.0 };
        }
    }
    ClassifierGrads {
        clf_w: h.transpose() * &g_logits,
        clf_b: g_logits.row_sum().transpose(),
        h: &g_logits * params.clf_w.transpose(),
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0.05..1.0));
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let p = EncoderParams::init(3, 4, 2, &mut rng);
        (a, x, p)
    }

    #[test]
    fn zero_weights_give_zero_representations() {
        let (a, x, p) = setup(0);
        let z = p.zeros_like();
        assert_eq!(
            gcn_forward(&a, &x, &z, None).unwrap().h,
            DMatrix::zeros(5, 4)
        );
    }

    #[test]
    fn uniform_adjacency_averages_features() {
        let (_, x, p) = setup(1);
        let a = DMatrix::from_element(5, 5, 0.3);
        let f = gcn_forward(&a, &x, &p, None).unwrap();
        let mean = x.row_mean();
        for r in 0..5 {
            assert!((f.m1.row(r) - &mean).amax() < 1e-15);
            assert!((f.a_hat.row(r).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let (a, x, p) = setup(2);
        let f = gcn_forward(&a, &x, &p, None).unwrap();
        let n = 5;
        let hid = 4;
        let mut ahat = vec![vec![0.0; n]; n];
        for i in 0..n {
            let s: f64 = (0..n).map(|j| a[(i, j)]).sum();
            for j in 0..n {
                ahat[i][j] = a[(i, j)] / s;
            }
        }
        let mut h1 = vec![vec![0.0; hid]; n];
        for i in 0..n {
            for k in 0..hid {
                let mut acc = 0.0;
                for j in 0..n {
                    for c in 0..3 {
                        acc += ahat[i][j] * x[(j, c)] * p.gcn_w1[(c, k)];
                    }
                }
                h1[i][k] = f64::max(acc, 0.0);
            }
        }
        for i in 0..n {
            for k in 0..hid {
                let mut acc = 0.0;
                for j in 0..n {
                    for l in 0..hid {
                        acc += ahat[i][j] * h1[j][l] * p.gcn_w2[(l, k)];
                    }
                }
                assert!((acc - f.h[(i, k)]).abs() < 1e-12);
            }
        }
        // eval mode is deterministic
        assert_eq!(gcn_forward(&a, &x, &p, None).unwrap().h, f.h);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (a, _, p) = setup(3);
        let x = DMatrix::zeros(5, 7);
        assert!(gcn_forward(&a, &x, &p, None).is_err());
    }

    #[test]
    fn softmax_cases() {
        let (a, x, mut p) = setup(4);
        let h = gcn_forward(&a, &x, &p, None).unwrap().h;
        let base = classify(&h, &p);
        for row in base.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        p.clf_b.add_scalar_mut(3.0);
        assert!((classify(&h, &p) - &base).amax() < 1e-15);

        let z = p.zeros_like();
        assert!(classify(&h, &z).iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let logits = &h * &p.clf_w;
        for r in 0..h.nrows() {
            let e: Vec<f64> = (0..2)
                .map(|c| (logits[(r, c)] + p.clf_b[c]).exp())
                .collect();
            let s: f64 = e.iter().sum();
            for c in 0..2 {
                assert!((base[(r, c)] - e[c] / s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let u = DMatrix::from_element(1, 5, 0.2);
        assert!((cross_entropy(&u, &[0], &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let one_hot = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(cross_entropy(&one_hot, &[0], &[0]).unwrap().abs() < 1e-15);
        assert!((cross_entropy(&one_hot, &[0], &[1]).unwrap() + LOG_EPS.ln()).abs() < 1e-12);
        assert!(cross_entropy(&u, &[], &[]).is_err());
        assert!(cross_entropy(&u, &[0], &[5]).is_err());

        let p = DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let ce = cross_entropy(&p, &[0, 1], &[2, 0]).unwrap();
        assert!((ce - (-(0.5f64).ln() - 0.6f64.ln())).abs() < 1e-15);
        assert!(ce >= 0.0);
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let (a, x, p) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = DropoutMask::sample(5, 4, 0.5, &mut rng);
        let rows = [0, 2, 4];
        let labels = [1, 0, 1];
        let loss = |a: &DMatrix<f64>, p: &EncoderParams| {
            let f = gcn_forward(a, &x, p, Some(&mask)).unwrap();
            cross_entropy(&classify(&f.h, p), &rows, &labels).unwrap()
        };
        let f = gcn_forward(&a, &x, &p, Some(&mask)).unwrap();
        let probs = classify(&f.h, &p);
        let cg = classifier_backward(&f.h, &probs, &p, &rows, &labels);
        let gg = gcn_backward(&f, &x, &p, Some(&mask), &cg.h, true);
        let eps = 1e-6;
        let check = |fd: f64, an: f64| assert!((fd - an).abs() < 1e-7, "fd {fd} an {an}");
        for idx in 0..p.gcn_w1.len() {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi.gcn_w1[idx] += eps;
            lo.gcn_w1[idx] -= eps;
            check(
                (loss(&a, &hi) - loss(&a, &lo)) / (2.0 * eps),
                gg.gcn_w1[idx],
            );
        }
        for idx in 0..p.clf_w.len() {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi.clf_w[idx] += eps;
            lo.clf_w[idx] -= eps;
            check((loss(&a, &hi) - loss(&a, &lo)) / (2.0 * eps), cg.clf_w[idx]);
        }
        let g_adj = gg.adjacency.unwrap();
        for idx in 0..a.len() {
            let (mut hi, mut lo) = (a.clone(), a.clone());
            hi[idx] += eps;
            lo[idx] -= eps;
            check((loss(&hi, &p) - loss(&lo, &p)) / (2.0 * eps), g_adj[idx]);
        }
    }
}
