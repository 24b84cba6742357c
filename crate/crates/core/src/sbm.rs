//! Stochastic-block-model datasets for desk-scale experiments.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GlitterError, Result};
use crate::graph::{ClassId, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub num_graphs: usize,
    pub classes_per_graph: usize,
    pub nodes_per_class: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-class feature centers.
    pub center_scale: f64,
    /// Standard deviation of per-node feature noise around its class center.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            num_graphs: 1,
            classes_per_graph: 10,
            nodes_per_class: 30,
            p_intra: 0.1,
            p_inter: 0.005,
            feature_dim: 16,
            center_scale: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_inter && self.p_inter < self.p_intra && self.p_intra <= 1.0) {
            return Err(GlitterError::arg(format!(
                "need 0 <= p_inter < p_intra <= 1, got p_inter={} p_intra={}",
                self.p_inter, self.p_intra
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma <= 0.0 || !self.center_scale.is_finite() {
            return Err(GlitterError::arg(
                "noise_sigma must be positive and center_scale finite",
            ));
        }
        if self.num_graphs == 0
            || self.classes_per_graph == 0
            || self.nodes_per_class == 0
            || self.feature_dim == 0
        {
            return Err(GlitterError::arg("SBM counts must be positive"));
        }
        Ok(())
    }
}

/// Every graph shares the same class universe `0..classes_per_graph` and the
/// same class centers; graphs differ in edges and noise.
pub fn generate_sbm_dataset(cfg: &SbmConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.classes_per_graph;
    let d = cfg.feature_dim;
    let centers = DMatrix::from_fn(k, d, |_, _| {
        cfg.center_scale * rng.sample::<f64, _>(StandardNormal)
    });

    let n = k * cfg.nodes_per_class;
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for gid in 0..cfg.num_graphs {
        let class_of = |v: usize| v / cfg.nodes_per_class;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if class_of(u) == class_of(v) {
                    cfg.p_intra
                } else {
                    cfg.p_inter
                };
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let features = DMatrix::from_fn(n, d, |r, c| {
            centers[(class_of(r), c)] + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        });
        let labels = (0..n).map(|v| Some(class_of(v) as ClassId)).collect();
        graphs.push(Graph::new(gid, edges, features, labels)?);
    }
    Dataset::new("sbm", d, (0..k as ClassId).collect(), graphs)
}

/// Erdős–Rényi `G(n, p)` graph with standard-normal features and no labels.
pub fn gnp_graph<R: Rng>(n: usize, p: f64, feature_dim: usize, rng: &mut R) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let features = DMatrix::from_fn(n, feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    Graph::new(0, edges, features, vec![None; n]).expect("generated graph is valid")
}
