//! Episodic meta-training: per-task inner adaptation of the structure and
//! encoder parameters followed by a first-order meta-update.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::episode::{
    make_split, sample_episode, substream, Episode, Phase, Setting, SplitRatios, SplitSpec, Stream,
};
use crate::error::{GlitterError, Result};
use crate::eval::adapt_and_predict;
use crate::model::{DropoutMask, EncoderParams};
use crate::objective::{compute_gradients, Groups, LossKind, LossValue, ParamSet, TaskContext};
use crate::structure::{assemble_task_nodes, StructureParams, TaskStructure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Hop radius of local sampling.
    pub h: u32,
    /// Per-class budget of common sampling.
    pub c: usize,
    /// Truncation depth of the absorption series.
    pub m: usize,
    /// Inner adaptation steps.
    pub eta: usize,
    pub alpha: f64,
    /// Encoder/classifier meta learning rate.
    pub beta1: f64,
    /// Structure meta learning rate.
    pub beta2: f64,
    /// Number of meta-training tasks.
    pub epochs: usize,
    pub hidden_dim: usize,
    pub d_a: usize,
    pub d_max: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub setting: Setting,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub first_order: bool,
    /// Normalize per-class absorption scores across classes before the MI loss.
    pub normalize_class_scores: bool,
    /// Apply meta-steps to the pre-adaptation parameters instead of the adapted ones.
    pub classic_maml: bool,
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 3,
            q_query: 10,
            h: 2,
            c: 10,
            m: 2,
            eta: 20,
            alpha: 0.1,
            beta1: 0.005,
            beta2: 0.005,
            epochs: 500,
            hidden_dim: 16,
            d_a: 16,
            d_max: 10,
            dropout_rate: 0.5,
            weight_decay: 1e-4,
            seed: 0,
            setting: Setting::SharedGraphDisjointLabel,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            first_order: true,
            normalize_class_scores: true,
            classic_maml: false,
            val_every: 50,
            val_episodes: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GlitterError::Config(msg));
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot == 0 || self.q_query == 0 {
            return bad("k_shot and q_query must be positive".into());
        }
        if self.eta == 0 {
            return bad("eta must be at least 1".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.hidden_dim == 0 || self.d_a == 0 {
            return bad("hidden_dim and d_a must be positive".into());
        }
        if !self.first_order {
            return bad(
                "only first-order meta-gradients are implemented; set first_order = true".into(),
            );
        }
        if self.val_every == 0 {
            return bad("val_every must be positive".into());
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn init_params(&self, feature_dim: usize) -> ParamSet {
        let mut rng = substream(self.seed, Stream::Init, 0, 0);
        let structure = StructureParams::init(feature_dim, self.d_a, self.d_max, &mut rng);
        let encoder = EncoderParams::init(feature_dim, self.hidden_dim, self.n_way, &mut rng);
        ParamSet { structure, encoder }
    }

    fn task_context<'a>(
        &self,
        task: &'a TaskStructure,
        features: &'a DMatrix<f64>,
        dropout: Option<&'a DropoutMask>,
    ) -> TaskContext<'a> {
        TaskContext {
            task,
            features,
            truncation: self.m,
            normalize_scores: self.normalize_class_scores,
            dropout,
        }
    }

    fn dropout_mask<R: Rng>(&self, rows: usize, rng: &mut R) -> Option<DropoutMask> {
        (self.dropout_rate > 0.0)
            .then(|| DropoutMask::sample(rows, self.hidden_dim, self.dropout_rate, rng))
    }
}

/// Task structure plus the feature rows of its nodes.
pub fn prepare_task(
    dataset: &Dataset,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<(TaskStructure, DMatrix<f64>)> {
    let graph = dataset.graph(episode.graph_id).ok_or_else(|| {
        GlitterError::arg(format!(
            "episode refers to unknown graph {}",
            episode.graph_id
        ))
    })?;
    let task = assemble_task_nodes(graph, episode, cfg.h, cfg.c)?;
    let features = graph.feature_rows(&task.node_list);
    Ok((task, features))
}

/// Per-step losses of one inner adaptation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerTrace {
    pub structure_loss: Vec<f64>,
    pub support_loss: Vec<f64>,
}

fn diverged(err: GlitterError, trace: &InnerTrace) -> GlitterError {
    match err {
        GlitterError::Numerical(message) => GlitterError::Training {
            message,
            trace: Box::new(trace.clone()),
        },
        other => other,
    }
}

/// Runs `eta` inner steps. Each step updates the structure parameters on the
/// structure loss, then rebuilds the adjacency and updates the encoder on the
/// support cross-entropy.
pub fn inner_adapt<R: Rng>(
    task: &TaskStructure,
    features: &DMatrix<f64>,
    params: &ParamSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ParamSet, InnerTrace)> {
    let mut p = params.clone();
    let mut trace = InnerTrace::default();
    for _ in 0..cfg.eta {
        let mask = cfg.dropout_mask(task.len(), rng);
        let ctx = cfg.task_context(task, features, mask.as_ref());
        let ls = compute_gradients(LossKind::Structure, &ctx, &p, Groups::STRUCTURE)
            .map_err(|e| diverged(e, &trace))?;
        p.axpy(-cfg.alpha, &ls.grads, Groups::STRUCTURE);
        trace.structure_loss.push(ls.value);
        let lsup = compute_gradients(LossKind::Support, &ctx, &p, Groups::ENCODER)
            .map_err(|e| diverged(e, &trace))?;
        p.axpy(-cfg.alpha, &lsup.grads, Groups::ENCODER);
        trace.support_loss.push(lsup.value);
        if let Some(name) = p.first_non_finite() {
            return Err(GlitterError::Training {
                message: format!("{name} became non-finite during inner adaptation"),
                trace: Box::new(trace),
            });
        }
    }
    Ok((p, trace))
}

/// Everything produced by one meta-update besides the new parameters.
#[derive(Debug, Clone)]
pub struct MetaStep {
    pub adapted: ParamSet,
    pub trace: InnerTrace,
    pub query: LossValue,
    pub structure: LossValue,
}

/// Inner adaptation followed by the two meta-steps, taken from the adapted
/// parameters (or from `params` when `classic_maml` is set).
pub fn meta_update<R: Rng>(
    task: &TaskStructure,
    features: &DMatrix<f64>,
    params: &ParamSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ParamSet, MetaStep)> {
    let (adapted, trace) = inner_adapt(task, features, params, cfg, rng)?;
    let mask = cfg.dropout_mask(task.len(), rng);
    let ctx = cfg.task_context(task, features, mask.as_ref());
    let query = compute_gradients(LossKind::Query, &ctx, &adapted, Groups::ENCODER)
        .map_err(|e| diverged(e, &trace))?;
    let structure = compute_gradients(LossKind::Structure, &ctx, &adapted, Groups::STRUCTURE)
        .map_err(|e| diverged(e, &trace))?;

    let mut next = if cfg.classic_maml {
        params.clone()
    } else {
        adapted.clone()
    };
    let mut g_encoder = query.grads.clone();
    g_encoder.axpy(cfg.weight_decay, &next, Groups::ENCODER);
    next.axpy(-cfg.beta1, &g_encoder, Groups::ENCODER);
    next.axpy(-cfg.beta2, &structure.grads, Groups::STRUCTURE);
    if let Some(name) = next.first_non_finite() {
        return Err(GlitterError::Training {
            message: format!("{name} became non-finite in the meta-update"),
            trace: Box::new(trace),
        });
    }
    Ok((
        next,
        MetaStep {
            adapted,
            trace,
            query,
            structure,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub graph_id: usize,
    pub structure_loss: Vec<f64>,
    pub support_loss: Vec<f64>,
    pub query_loss: f64,
    /// Query accuracy of the adapted model with dropout off.
    pub query_accuracy: f64,
    /// Mean validation accuracy, on episodes where validation ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpisodeRecord>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn val_accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.val_accuracy).collect()
    }

    /// One JSON object per episode, then a closing object with the wall time.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e| GlitterError::io(path, e);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| GlitterError::arg(e.to_string()))?;
            writeln!(out, "{line}").map_err(io)?;
        }
        writeln!(out, "{{\"wall_time_secs\":{}}}", self.wall_time_secs).map_err(io)?;
        out.flush().map_err(io)
    }
}

/// Mean query accuracy over `cfg.val_episodes` validation episodes.
pub fn validate_params(
    dataset: &Dataset,
    split: &SplitSpec,
    params: &ParamSet,
    cfg: &TrainConfig,
    round: u32,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..cfg.val_episodes {
        let mut rng = substream(cfg.seed, Stream::ValEpisodes, round, i as u32);
        let episode = sample_episode(
            dataset,
            split,
            Phase::Val,
            cfg.n_way,
            cfg.k_shot,
            cfg.q_query,
            &mut rng,
        )?;
        let (task, features) = prepare_task(dataset, &episode, cfg)?;
        total += adapt_and_predict(&task, &features, params, cfg, &mut rng)?.accuracy();
    }
    Ok(total / cfg.val_episodes.max(1) as f64)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Sequential meta-training over `cfg.epochs` sampled training tasks.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let split = make_split(
        dataset,
        cfg.setting,
        cfg.split_ratios(),
        cfg.n_way,
        cfg.seed,
    )?;
    let validate = split.supports(Phase::Val, cfg.n_way) && cfg.val_episodes > 0;
    let mut params = cfg.init_params(dataset.feature_dim);
    let mut log = TrainLog::default();
    for e in 0..cfg.epochs {
        let mut ep_rng = substream(cfg.seed, Stream::TrainEpisodes, e as u32, 0);
        let episode = sample_episode(
            dataset,
            &split,
            Phase::Train,
            cfg.n_way,
            cfg.k_shot,
            cfg.q_query,
            &mut ep_rng,
        )?;
        let (task, features) = prepare_task(dataset, &episode, cfg)?;
        let mut model_rng = substream(cfg.seed, Stream::TrainModel, e as u32, 0);
        let (next, step) = meta_update(&task, &features, &params, cfg, &mut model_rng)?;
        let prediction = crate::eval::predict(&task, &features, &step.adapted)?;
        params = next;

        let val_accuracy = if validate && (e + 1) % cfg.val_every == 0 {
            Some(validate_params(
                dataset,
                &split,
                &params,
                cfg,
                ((e + 1) / cfg.val_every) as u32,
            )?)
        } else {
            None
        };
        log.records.push(EpisodeRecord {
            episode: e,
            graph_id: episode.graph_id,
            structure_loss: step.trace.structure_loss,
            support_loss: step.trace.support_loss,
            query_loss: step.query.value,
            query_accuracy: prediction.accuracy(),
            val_accuracy,
        });
    }
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, cfg.clone(), dataset.feature_dim, cfg.epochs),
        log,
    })
}
