//! Full parameter set and the single entry point that evaluates any of the
//! training losses together with its gradient.

use nalgebra::DMatrix;

use crate::error::{GlitterError, Result};
use crate::influence::{
    build_absorbing_chain, chain_backward, class_influence_loss_grad, truncated_backward,
    truncated_forward,
};
use crate::mi::{
    mutual_info_loss_grad, query_class_distribution, query_class_distribution_backward,
};
use crate::model::{
    classifier_backward, classify, cross_entropy, gcn_backward, gcn_forward, DropoutMask,
    EncoderParams,
};
use crate::structure::{adjacency_backward, build_adjacency, StructureParams, TaskStructure};

/// Names of the tensors in [`ParamSet`], in flattening order.
pub const TENSOR_NAMES: [&str; 7] = [
    "W1",
    "W2",
    "psi_table",
    "gcn_W1",
    "gcn_W2",
    "clf_W",
    "clf_b",
];
/// Number of leading entries of [`TENSOR_NAMES`] that belong to the structure learner.
pub const STRUCTURE_TENSORS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub structure: StructureParams,
    pub encoder: EncoderParams,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            structure: self.structure.zeros_like(),
            encoder: self.encoder.zeros_like(),
        }
    }

    /// `(name, (rows, cols), column-major values)` for every tensor.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let s = &self.structure;
        let e = &self.encoder;
        vec![
            (TENSOR_NAMES[0], s.w1.shape(), s.w1.as_slice()),
            (TENSOR_NAMES[1], s.w2.shape(), s.w2.as_slice()),
            (TENSOR_NAMES[2], s.psi.shape(), s.psi.as_slice()),
            (TENSOR_NAMES[3], e.gcn_w1.shape(), e.gcn_w1.as_slice()),
            (TENSOR_NAMES[4], e.gcn_w2.shape(), e.gcn_w2.as_slice()),
            (TENSOR_NAMES[5], e.clf_w.shape(), e.clf_w.as_slice()),
            (TENSOR_NAMES[6], e.clf_b.shape(), e.clf_b.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let s = &mut self.structure;
        let e = &mut self.encoder;
        vec![
            (TENSOR_NAMES[0], s.w1.as_mut_slice()),
            (TENSOR_NAMES[1], s.w2.as_mut_slice()),
            (TENSOR_NAMES[2], s.psi.as_mut_slice()),
            (TENSOR_NAMES[3], e.gcn_w1.as_mut_slice()),
            (TENSOR_NAMES[4], e.gcn_w2.as_mut_slice()),
            (TENSOR_NAMES[5], e.clf_w.as_mut_slice()),
            (TENSOR_NAMES[6], e.clf_b.as_mut_slice()),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.2.iter().copied())
            .collect()
    }

    /// Overwrites every tensor from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(GlitterError::arg(format!(
                "flat vector has {} entries, parameter set has {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for (_, dst) in self.tensors_mut() {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }

    /// `self += alpha * other` restricted to the requested groups.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet, groups: Groups) {
        if groups.structure {
            self.structure.w1 += alpha * &other.structure.w1;
            self.structure.w2 += alpha * &other.structure.w2;
            self.structure.psi += alpha * &other.structure.psi;
        }
        if groups.encoder {
            self.encoder.gcn_w1 += alpha * &other.encoder.gcn_w1;
            self.encoder.gcn_w2 += alpha * &other.encoder.gcn_w2;
            self.encoder.clf_w += alpha * &other.encoder.clf_w;
            self.encoder.clf_b += alpha * &other.encoder.clf_b;
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|t| t.2.iter().any(|v| !v.is_finite()))
            .map(|t| t.0)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Which parameter groups a gradient or update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Groups {
    pub structure: bool,
    pub encoder: bool,
}

impl Groups {
    pub const ALL: Groups = Groups {
        structure: true,
        encoder: true,
    };
    pub const STRUCTURE: Groups = Groups {
        structure: true,
        encoder: false,
    };
    pub const ENCODER: Groups = Groups {
        structure: false,
        encoder: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Class-influence loss on the encoder output.
    Influence,
    /// Mutual-information loss on the absorption-based query distribution.
    MutualInfo,
    /// `Influence + MutualInfo`.
    Structure,
    /// Summed cross-entropy over support rows.
    Support,
    /// Summed cross-entropy over query rows.
    Query,
    /// `½ Σ θ²` over every tensor; a gradient-plumbing probe.
    L2Probe,
}

/// Everything about one meta-task that the losses read but never learn.
pub struct TaskContext<'a> {
    pub task: &'a TaskStructure,
    pub features: &'a DMatrix<f64>,
    pub truncation: usize,
    pub normalize_scores: bool,
    pub dropout: Option<&'a DropoutMask>,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    /// Zero for groups that were not requested.
    pub grads: ParamSet,
}

/// Evaluates `kind` at `params` and differentiates it w.r.t. `groups`.
pub fn compute_gradients(
    kind: LossKind,
    ctx: &TaskContext,
    params: &ParamSet,
    groups: Groups,
) -> Result<LossValue> {
    let mut grads = params.zeros_like();
    if kind == LossKind::L2Probe {
        let value = 0.5 * params.flatten().iter().map(|v| v * v).sum::<f64>();
        grads.axpy(1.0, params, groups);
        return Ok(LossValue { value, grads });
    }

    let task = ctx.task;
    let x = ctx.features;
    let adj = build_adjacency(task, x, &params.structure)?;
    let mut g_adj = DMatrix::zeros(task.len(), task.len());
    let mut value = 0.0;

    let wants_influence = matches!(kind, LossKind::Influence | LossKind::Structure);
    let wants_mi = matches!(kind, LossKind::MutualInfo | LossKind::Structure);
    let wants_ce = matches!(kind, LossKind::Support | LossKind::Query);

    if wants_influence || wants_ce {
        let gcn = gcn_forward(&adj.adjacency, x, &params.encoder, ctx.dropout)?;
        let g_h = if wants_influence {
            let (ln, g_h) = class_influence_loss_grad(&gcn.h, &task.class_rows())?;
            value += ln;
            g_h
        } else {
            let (rows, labels) = if kind == LossKind::Support {
                (&task.support_index, &task.support_slots)
            } else {
                (&task.query_index, &task.query_slots)
            };
            let probs = classify(&gcn.h, &params.encoder);
            value += cross_entropy(&probs, rows, labels)?;
            let cg = classifier_backward(&gcn.h, &probs, &params.encoder, rows, labels);
            if groups.encoder {
                grads.encoder.clf_w = cg.clf_w;
                grads.encoder.clf_b = cg.clf_b;
            }
            cg.h
        };
        let gg = gcn_backward(
            &gcn,
            x,
            &params.encoder,
            ctx.dropout,
            &g_h,
            groups.structure,
        );
        if groups.encoder {
            grads.encoder.gcn_w1 = gg.gcn_w1;
            grads.encoder.gcn_w2 = gg.gcn_w2;
        }
        if let Some(g) = gg.adjacency {
            g_adj += g;
        }
    }

    if wants_mi {
        let chain = build_absorbing_chain(&adj.adjacency, &task.support_index)?;
        let trunc = truncated_forward(&chain, ctx.truncation);
        let mut position = vec![usize::MAX; task.len()];
        for (p, &row) in chain.non_absorbing.iter().enumerate() {
            position[row] = p;
        }
        let query_rows: Vec<usize> = task.query_index.iter().map(|&q| position[q]).collect();
        if query_rows.contains(&usize::MAX) {
            return Err(GlitterError::arg("query row is also a support row"));
        }
        let dist = query_class_distribution(
            &trunc.probs,
            &task.support_slots,
            &query_rows,
            task.n_way,
            ctx.normalize_scores,
        )?;
        let (lm, g_probs) = mutual_info_loss_grad(&dist.probs);
        value += lm;
        if groups.structure {
            let g_b = query_class_distribution_backward(
                &trunc.probs,
                &dist,
                &task.support_slots,
                &query_rows,
                &g_probs,
            );
            let (g_q, g_r) = truncated_backward(&chain, &trunc, &g_b);
            g_adj += chain_backward(&chain, &g_q, &g_r);
        }
    }

    if groups.structure {
        grads.structure = adjacency_backward(&adj, x, &g_adj);
    }
    if !value.is_finite() {
        return Err(GlitterError::Numerical(format!("{kind:?} loss is {value}")));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(GlitterError::Numerical(format!(
            "non-finite gradient in {name} for {kind:?} loss"
        )));
    }
    Ok(LossValue { value, grads })
}

/// Evaluates the loss only.
pub fn loss_value(kind: LossKind, ctx: &TaskContext, params: &ParamSet) -> Result<f64> {
    let none = Groups {
        structure: false,
        encoder: false,
    };
    compute_gradients(kind, ctx, params, none).map(|l| l.value)
}
