//! Class/graph splits for the four evaluation regimes and N-way K-shot
//! episode sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GlitterError, Result};
use crate::graph::{ClassId, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    SharedGraphDisjointLabel,
    DisjointGraphSharedLabel,
    DisjointGraphDisjointLabel,
    SingleGraphDisjointLabel,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::SharedGraphDisjointLabel,
        Setting::DisjointGraphSharedLabel,
        Setting::DisjointGraphDisjointLabel,
        Setting::SingleGraphDisjointLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::SharedGraphDisjointLabel => "shared-graph-disjoint-label",
            Setting::DisjointGraphSharedLabel => "disjoint-graph-shared-label",
            Setting::DisjointGraphDisjointLabel => "disjoint-graph-disjoint-label",
            Setting::SingleGraphDisjointLabel => "single-graph-disjoint-label",
        }
    }

    pub fn disjoint_labels(self) -> bool {
        !matches!(self, Setting::DisjointGraphSharedLabel)
    }

    pub fn disjoint_graphs(self) -> bool {
        matches!(
            self,
            Setting::DisjointGraphSharedLabel | Setting::DisjointGraphDisjointLabel
        )
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = GlitterError;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GlitterError::Config(format!("unknown setting `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Rounds the validation and test shares; training takes the remainder.
    fn counts(&self, total: usize) -> Result<[usize; 3]> {
        let ratios = [self.train, self.val, self.test];
        if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(GlitterError::Config(format!(
                "split ratios must be nonnegative and sum to 1, got {:?}",
                ratios
            )));
        }
        let val = (self.val * total as f64).round() as usize;
        let test = (self.test * total as f64).round() as usize;
        if val + test > total {
            return Err(GlitterError::Config(format!(
                "cannot split {total} items with ratios {ratios:?}"
            )));
        }
        Ok([total - val - test, val, test])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    pub train_classes: Vec<ClassId>,
    pub val_classes: Vec<ClassId>,
    pub test_classes: Vec<ClassId>,
    pub train_graphs: Vec<usize>,
    pub val_graphs: Vec<usize>,
    pub test_graphs: Vec<usize>,
}

impl SplitSpec {
    pub fn classes(&self, phase: Phase) -> &[ClassId] {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Val => &self.val_classes,
            Phase::Test => &self.test_classes,
        }
    }

    pub fn graphs(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train_graphs,
            Phase::Val => &self.val_graphs,
            Phase::Test => &self.test_graphs,
        }
    }

    /// Whether `phase` has enough classes and at least one graph for `n_way` episodes.
    pub fn supports(&self, phase: Phase, n_way: usize) -> bool {
        self.classes(phase).len() >= n_way && !self.graphs(phase).is_empty()
    }
}

fn partition<T: Copy + Ord>(items: &[T], counts: [usize; 3], rng: &mut ChaCha8Rng) -> [Vec<T>; 3] {
    let perm = index::sample(rng, items.len(), items.len()).into_vec();
    let mut out: [Vec<T>; 3] = Default::default();
    let mut it = perm.into_iter();
    for (bucket, &c) in out.iter_mut().zip(&counts) {
        *bucket = it.by_ref().take(c).map(|i| items[i]).collect();
        bucket.sort_unstable();
    }
    out
}

/// Splits classes and graphs for `setting`.
///
/// Training and test phases must each hold at least `n_way` classes. A
/// validation phase with fewer classes is allowed; callers check
/// [`SplitSpec::supports`] before sampling validation episodes from it.
pub fn make_split(
    dataset: &Dataset,
    setting: Setting,
    ratios: SplitRatios,
    n_way: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let mut rng = substream(seed, Stream::Split, 0, 0);
    let graph_ids: Vec<usize> = dataset.graphs.iter().map(|g| g.id()).collect();
    let classes = &dataset.class_universe;

    if setting == Setting::SingleGraphDisjointLabel && graph_ids.len() != 1 {
        return Err(GlitterError::Config(format!(
            "{setting} needs a single-graph dataset, found {} graphs",
            graph_ids.len()
        )));
    }

    let [train_classes, val_classes, test_classes] = if setting.disjoint_labels() {
        partition(classes, ratios.counts(classes.len())?, &mut rng)
    } else {
        [classes.clone(), classes.clone(), classes.clone()]
    };
    let [train_graphs, val_graphs, test_graphs] = if setting.disjoint_graphs() {
        let split = partition(&graph_ids, ratios.counts(graph_ids.len())?, &mut rng);
        for (name, g) in ["train", "val", "test"].iter().zip(&split) {
            if g.is_empty() {
                return Err(GlitterError::Config(format!(
                    "{setting}: {name} phase received no graphs out of {}",
                    graph_ids.len()
                )));
            }
        }
        split
    } else {
        [graph_ids.clone(), graph_ids.clone(), graph_ids]
    };

    let spec = SplitSpec {
        setting,
        train_classes,
        val_classes,
        test_classes,
        train_graphs,
        val_graphs,
        test_graphs,
    };
    for phase in [Phase::Train, Phase::Test] {
        let have = spec.classes(phase).len();
        if have < n_way {
            return Err(GlitterError::Config(format!(
                "{phase:?} phase has {have} classes, fewer than N={n_way}"
            )));
        }
    }
    Ok(spec)
}

/// One N-way K-shot meta-task drawn from a single graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub graph_id: usize,
    pub phase: Phase,
    /// Class ids in ascending order; position is the slot index.
    pub class_slots: Vec<ClassId>,
    /// `support[slot][shot]`.
    pub support: Vec<Vec<NodeId>>,
    pub query: Vec<NodeId>,
    /// Ground-truth slot of each query node.
    pub query_slots: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_slots.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Support nodes flattened slot-major.
    pub fn support_nodes(&self) -> Vec<NodeId> {
        self.support.iter().flatten().copied().collect()
    }

    pub fn support_slots(&self) -> Vec<usize> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(s, nodes)| std::iter::repeat_n(s, nodes.len()))
            .collect()
    }
}

pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: &SplitSpec,
    phase: Phase,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(GlitterError::arg("N and K must be positive"));
    }
    let graphs = split.graphs(phase);
    if graphs.is_empty() {
        return Err(GlitterError::Config(format!(
            "{phase:?} phase has no graphs"
        )));
    }
    let graph_id = graphs[rng.random_range(0..graphs.len())];
    let graph = dataset
        .graph(graph_id)
        .ok_or_else(|| GlitterError::arg(format!("graph {graph_id} not in dataset")))?;

    let need = k_shot + q_query.div_ceil(n_way);
    let allowed: BTreeSet<ClassId> = split.classes(phase).iter().copied().collect();
    let mut by_class: std::collections::BTreeMap<ClassId, Vec<NodeId>> = Default::default();
    for (v, label) in graph.labels().iter().enumerate() {
        if let Some(c) = label.filter(|c| allowed.contains(c)) {
            by_class.entry(c).or_default().push(v);
        }
    }
    let eligible: Vec<ClassId> = by_class
        .iter()
        .filter(|(_, nodes)| nodes.len() >= need)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < n_way {
        let short = by_class
            .iter()
            .find(|(_, nodes)| nodes.len() < need)
            .map(|(&c, _)| c);
        return Err(GlitterError::Sampling {
            graph_id,
            class_id: short,
            message: format!(
                "{} classes have >= {need} labeled nodes, need {n_way}",
                eligible.len()
            ),
        });
    }

    let mut class_slots: Vec<ClassId> = index::sample(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    class_slots.sort_unstable();

    let base = q_query / n_way;
    let extra = q_query % n_way;
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(q_query);
    let mut query_slots = Vec::with_capacity(q_query);
    for (slot, c) in class_slots.iter().enumerate() {
        let pool = &by_class[c];
        let nq = base + usize::from(slot < extra);
        let picked = index::sample(rng, pool.len(), k_shot + nq).into_vec();
        support.push(picked[..k_shot].iter().map(|&i| pool[i]).collect());
        for &i in &picked[k_shot..] {
            query.push(pool[i]);
            query_slots.push(slot);
        }
    }

    Ok(Episode {
        graph_id,
        phase,
        class_slots,
        support,
        query,
        query_slots,
    })
}

/// Named random substreams so that every consumer of randomness is
/// reproducible independently of the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    TrainEpisodes,
    TrainModel,
    ValEpisodes,
    TestEpisodes,
    EvalModel,
    Init,
    Baseline,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::TrainEpisodes => 2,
            Stream::TrainModel => 3,
            Stream::ValEpisodes => 4,
            Stream::TestEpisodes => 5,
            Stream::EvalModel => 6,
            Stream::Init => 7,
            Stream::Baseline => 8,
        }
    }
}

/// Deterministic generator for `(seed, stream, outer, inner)`, e.g.
/// `(seed, TestEpisodes, repetition, episode)`.
pub fn substream(seed: u64, stream: Stream, outer: u32, inner: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.tag() << 56) | (u64::from(outer) << 28) | u64::from(inner));
    rng
}
