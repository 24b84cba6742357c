//! Episodic meta-test evaluation and the two reference baselines (raw-feature
//! KNN and a prototypical network on the induced subgraph).

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::episode::{make_split, sample_episode, substream, Episode, Phase, SplitSpec, Stream};
use crate::error::{GlitterError, Result};
use crate::model::{classify, gcn_backward, gcn_forward, DropoutMask, EncoderParams};
use crate::objective::ParamSet;
use crate::structure::{build_adjacency, TaskStructure};
use crate::trainer::{inner_adapt, prepare_task, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

impl Prediction {
    pub fn correct(&self) -> usize {
        self.predicted
            .iter()
            .zip(&self.truth)
            .filter(|(p, t)| p == t)
            .count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.truth.is_empty() {
            return 0.0;
        }
        self.correct() as f64 / self.truth.len() as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Query slots predicted by `params` with dropout off.
pub fn predict(
    task: &TaskStructure,
    features: &DMatrix<f64>,
    params: &ParamSet,
) -> Result<Prediction> {
    let adj = build_adjacency(task, features, &params.structure)?;
    let fwd = gcn_forward(&adj.adjacency, features, &params.encoder, None)?;
    let probs = classify(&fwd.h, &params.encoder);
    let predicted = task
        .query_index
        .iter()
        .map(|&r| argmax(probs.row(r).iter()))
        .collect();
    Ok(Prediction {
        predicted,
        truth: task.query_slots.clone(),
    })
}

/// Adapts a copy of `params` on the task, then predicts its queries.
pub fn adapt_and_predict<R: Rng>(
    task: &TaskStructure,
    features: &DMatrix<f64>,
    params: &ParamSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Prediction> {
    let (adapted, _) = inner_adapt(task, features, params, cfg, rng)?;
    predict(task, features, &adapted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub setting: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub per_repetition_accuracy: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over repetition means.
    pub std: f64,
    pub episodes_per_repetition: usize,
}

impl EvalReport {
    pub fn from_repetitions(
        model: &str,
        cfg: &TrainConfig,
        accs: Vec<f64>,
        episodes: usize,
    ) -> Self {
        let n = accs.len().max(1) as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self {
            model: model.to_string(),
            setting: cfg.setting.to_string(),
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            per_repetition_accuracy: accs,
            mean,
            std: var.sqrt(),
            episodes_per_repetition: episodes,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} | {} | {}-way {}-shot | {} episodes/rep",
            self.model, self.setting, self.n_way, self.k_shot, self.episodes_per_repetition
        )?;
        writeln!(f, "{:>4}  {:>8}", "rep", "accuracy")?;
        for (i, a) in self.per_repetition_accuracy.iter().enumerate() {
            writeln!(f, "{i:>4}  {a:>8.4}")?;
        }
        write!(f, "mean {:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub repetitions: usize,
    pub episodes_per_rep: usize,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            repetitions: 10,
            episodes_per_rep: 50,
            workers: 1,
        }
    }
}

/// Test episode `(rep, index)`; identical for every model given the seed.
pub fn test_episode(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    rep: usize,
    index: usize,
) -> Result<Episode> {
    let mut rng = substream(cfg.seed, Stream::TestEpisodes, rep as u32, index as u32);
    sample_episode(
        dataset,
        split,
        Phase::Test,
        cfg.n_way,
        cfg.k_shot,
        cfg.q_query,
        &mut rng,
    )
}

/// Runs `score` on every test episode and averages per repetition.
fn run_episodes<F>(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    opts: EvalOptions,
    score: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Episode, usize, usize) -> Result<Prediction> + Sync,
{
    if opts.repetitions == 0 || opts.episodes_per_rep == 0 {
        return Err(GlitterError::arg(
            "repetitions and episodes per repetition must be positive",
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..opts.repetitions)
        .flat_map(|r| (0..opts.episodes_per_rep).map(move |e| (r, e)))
        .collect();
    let run = |&(r, e): &(usize, usize)| -> Result<(usize, usize)> {
        let episode = test_episode(dataset, split, cfg, r, e)?;
        let p = score(&episode, r, e)?;
        Ok((p.correct(), p.truth.len()))
    };
    let counts: Vec<(usize, usize)> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| GlitterError::arg(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(counts
        .chunks(opts.episodes_per_rep)
        .map(|chunk| {
            let correct: usize = chunk.iter().map(|c| c.0).sum();
            let total: usize = chunk.iter().map(|c| c.1).sum();
            correct as f64 / total.max(1) as f64
        })
        .collect())
}

/// Meta-test accuracy of a checkpoint. The checkpoint is never modified; each
/// episode adapts its own copy of the meta-parameters.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: EvalOptions,
) -> Result<EvalReport> {
    cfg.validate()?;
    if ckpt.feature_dim != dataset.feature_dim {
        return Err(GlitterError::Schema(format!(
            "checkpoint expects feature dimension {}, dataset has {}",
            ckpt.feature_dim, dataset.feature_dim
        )));
    }
    ckpt.check_compatible(cfg, dataset.feature_dim)?;
    let split = make_split(
        dataset,
        cfg.setting,
        cfg.split_ratios(),
        cfg.n_way,
        cfg.seed,
    )?;
    let accs = run_episodes(dataset, &split, cfg, opts, |episode, r, e| {
        let (task, features) = prepare_task(dataset, episode, cfg)?;
        let mut rng = substream(cfg.seed, Stream::EvalModel, r as u32, e as u32);
        adapt_and_predict(&task, &features, &ckpt.params, cfg, &mut rng)
    })?;
    Ok(EvalReport::from_repetitions(
        "glitter",
        cfg,
        accs,
        opts.episodes_per_rep,
    ))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Majority slot among the `k` support nodes most cosine-similar to each query
/// on raw features. Similarity ties keep support order; vote ties go to the
/// lowest slot.
pub fn knn_predict(episode: &Episode, features: &DMatrix<f64>, k: usize) -> Result<Prediction> {
    let support = episode.support_nodes();
    let slots = episode.support_slots();
    if k == 0 || k > support.len() {
        return Err(GlitterError::arg(format!(
            "k = {k} must lie in 1..={}",
            support.len()
        )));
    }
    let row = |v: usize| features.row(v).iter().copied().collect::<Vec<f64>>();
    let support_rows: Vec<Vec<f64>> = support.iter().map(|&v| row(v)).collect();
    let predicted = episode
        .query
        .iter()
        .map(|&q| {
            let qr = row(q);
            let mut ranked: Vec<(f64, usize)> = support_rows
                .iter()
                .enumerate()
                .map(|(i, s)| (cosine(&qr, s), i))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; episode.n_way()];
            for &(_, i) in &ranked[..k] {
                votes[slots[i]] += 1;
            }
            let top = *votes.iter().max().unwrap();
            votes.iter().position(|&v| v == top).unwrap()
        })
        .collect();
    Ok(Prediction {
        predicted,
        truth: episode.query_slots.clone(),
    })
}

pub fn knn_baseline(episode: &Episode, features: &DMatrix<f64>, k: usize) -> Result<f64> {
    knn_predict(episode, features, k).map(|p| p.accuracy())
}

pub fn evaluate_knn(
    dataset: &Dataset,
    cfg: &TrainConfig,
    k: usize,
    opts: EvalOptions,
) -> Result<EvalReport> {
    cfg.validate()?;
    let split = make_split(
        dataset,
        cfg.setting,
        cfg.split_ratios(),
        cfg.n_way,
        cfg.seed,
    )?;
    let accs = run_episodes(dataset, &split, cfg, opts, |episode, _, _| {
        let graph = dataset
            .graph(episode.graph_id)
            .expect("sampled graph exists");
        knn_predict(episode, graph.features(), k)
    })?;
    Ok(EvalReport::from_repetitions(
        "knn",
        cfg,
        accs,
        opts.episodes_per_rep,
    ))
}

/// Settings of the prototypical-network baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            weight_decay: 0.0005,
        }
    }
}

/// Unit adjacency of the original graph induced on the task nodes, with self-loops.
pub fn induced_adjacency(task: &TaskStructure) -> DMatrix<f64> {
    let n = task.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j || task.spd[(i, j)] == 1 {
            1.0
        } else {
            0.0
        }
    })
}

fn prototypes(h: &DMatrix<f64>, task: &TaskStructure) -> DMatrix<f64> {
    let mut protos = DMatrix::zeros(task.n_way, h.ncols());
    let mut counts = vec![0.0; task.n_way];
    for (&row, &slot) in task.support_index.iter().zip(&task.support_slots) {
        let mut p = protos.row_mut(slot);
        p += h.row(row);
        counts[slot] += 1.0;
    }
    for (s, c) in counts.into_iter().enumerate() {
        if c > 0.0 {
            let mut p = protos.row_mut(s);
            p /= c;
        }
    }
    protos
}

fn sq_dists(h: &DMatrix<f64>, protos: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), protos.nrows(), |q, s| {
        (h.row(rows[q]) - protos.row(s)).norm_squared()
    })
}

/// Summed cross-entropy of `softmax(-‖h_q − c_s‖²)` over query rows and its
/// gradient w.r.t. the two GCN weight matrices.
pub fn protonet_loss_grad(
    adjacency: &DMatrix<f64>,
    features: &DMatrix<f64>,
    task: &TaskStructure,
    params: &EncoderParams,
    dropout: Option<&DropoutMask>,
) -> Result<(f64, EncoderParams)> {
    let fwd = gcn_forward(adjacency, features, params, dropout)?;
    let h = &fwd.h;
    let protos = prototypes(h, task);
    let d = sq_dists(h, &protos, &task.query_index);
    let mut loss = 0.0;
    let mut g_h = DMatrix::zeros(h.nrows(), h.ncols());
    let mut g_protos = DMatrix::zeros(protos.nrows(), protos.ncols());
    for (q, (&row, &y)) in task.query_index.iter().zip(&task.query_slots).enumerate() {
        let logits: Vec<f64> = d.row(q).iter().map(|v| -v).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_p: Vec<f64> = logits.iter().map(|l| l - max - z.ln()).collect();
        loss -= log_p[y];
        for (s, lp) in log_p.iter().enumerate() {
            // dL/dd_qs = 1[s = y] − p_s
            let g_d = if s == y { 1.0 } else { 0.0 } - lp.exp();
            let diff = h.row(row) - protos.row(s);
            let mut gh = g_h.row_mut(row);
            gh += 2.0 * g_d * &diff;
            let mut gp = g_protos.row_mut(s);
            gp -= 2.0 * g_d * &diff;
        }
    }
    let class_rows = task.class_rows();
    for (s, rows) in class_rows.iter().enumerate() {
        for &r in rows {
            let mut gh = g_h.row_mut(r);
            gh += g_protos.row(s) / rows.len() as f64;
        }
    }
    let gg = gcn_backward(&fwd, features, params, dropout, &g_h, false);
    let mut grads = params.zeros_like();
    grads.gcn_w1 = gg.gcn_w1;
    grads.gcn_w2 = gg.gcn_w2;
    Ok((loss, grads))
}

/// Nearest-prototype prediction with dropout off; distance ties go to the lowest slot.
pub fn protonet_predict(
    adjacency: &DMatrix<f64>,
    features: &DMatrix<f64>,
    task: &TaskStructure,
    params: &EncoderParams,
) -> Result<Prediction> {
    let h = gcn_forward(adjacency, features, params, None)?.h;
    let d = sq_dists(&h, &prototypes(&h, task), &task.query_index);
    let predicted = (0..d.nrows())
        .map(|q| argmax(d.row(q).map(|v| -v).iter()))
        .collect();
    Ok(Prediction {
        predicted,
        truth: task.query_slots.clone(),
    })
}

/// Episodic training on the same training-episode stream as the main model.
pub fn protonet_baseline_train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    proto: ProtoConfig,
) -> Result<EncoderParams> {
    cfg.validate()?;
    let split = make_split(
        dataset,
        cfg.setting,
        cfg.split_ratios(),
        cfg.n_way,
        cfg.seed,
    )?;
    let mut params = cfg.init_params(dataset.feature_dim).encoder;
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
        let adjacency = induced_adjacency(&task);
        let mut rng = substream(cfg.seed, Stream::Baseline, e as u32, 0);
        let mask = (cfg.dropout_rate > 0.0)
            .then(|| DropoutMask::sample(task.len(), cfg.hidden_dim, cfg.dropout_rate, &mut rng));
        let (loss, grads) =
            protonet_loss_grad(&adjacency, &features, &task, &params, mask.as_ref())?;
        if !loss.is_finite() {
            return Err(GlitterError::Numerical(format!(
                "prototype loss is {loss} at episode {e}"
            )));
        }
        params.gcn_w1 -=
            proto.learning_rate * (&grads.gcn_w1 + proto.weight_decay * &params.gcn_w1);
        params.gcn_w2 -=
            proto.learning_rate * (&grads.gcn_w2 + proto.weight_decay * &params.gcn_w2);
    }
    Ok(params)
}

pub fn protonet_baseline_eval(
    params: &EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let split = make_split(
        dataset,
        cfg.setting,
        cfg.split_ratios(),
        cfg.n_way,
        cfg.seed,
    )?;
    let accs = run_episodes(dataset, &split, cfg, opts, |episode, _, _| {
        let (task, features) = prepare_task(dataset, episode, cfg)?;
        let adjacency = induced_adjacency(&task);
        protonet_predict(&adjacency, &features, &task, params)
    })?;
    Ok(EvalReport::from_repetitions(
        "protonet",
        cfg,
        accs,
        opts.episodes_per_rep,
    ))
}
