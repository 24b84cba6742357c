//! Checkpoint persistence: a text document of named, shaped arrays plus the
//! training configuration they were produced under.
//!
//! ```text
//! glitter-checkpoint 1
//! feature_dim 8
//! config {"n_way":3,...}
//! rng_state chacha8 seed=0 episodes=300
//! tensor W1 16 8
//! <16 lines of 8 values>
//! ...
//! end
//! ```
//!
//! Values are written as `{:.16e}` (17 significant digits), which is exact for `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{GlitterError, Result};
use crate::model::EncoderParams;
use crate::objective::ParamSet;
use crate::structure::StructureParams;
use crate::trainer::TrainConfig;

const MAGIC: &str = "glitter-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: TrainConfig,
    pub feature_dim: usize,
    /// How the random streams that produced this checkpoint were derived.
    pub rng_state: String,
}

impl Checkpoint {
    pub fn new(params: ParamSet, config: TrainConfig, feature_dim: usize, episodes: usize) -> Self {
        let rng_state = format!("chacha8 seed={} episodes={episodes}", config.seed);
        Self {
            params,
            config,
            feature_dim,
            rng_state,
        }
    }

    /// Expected `(rows, cols)` of every tensor under `cfg`.
    pub fn expected_shapes(cfg: &TrainConfig, feature_dim: usize) -> [(usize, usize); 7] {
        [
            (cfg.d_a, feature_dim),
            (cfg.d_a, feature_dim),
            (cfg.d_max + 2, 1),
            (feature_dim, cfg.hidden_dim),
            (cfg.hidden_dim, cfg.hidden_dim),
            (cfg.hidden_dim, cfg.n_way),
            (cfg.n_way, 1),
        ]
    }

    /// Schema error unless the stored tensors fit `cfg` and `feature_dim`.
    pub fn check_compatible(&self, cfg: &TrainConfig, feature_dim: usize) -> Result<()> {
        let expected = Self::expected_shapes(cfg, feature_dim);
        for ((name, shape, _), want) in self.params.tensors().into_iter().zip(expected) {
            if shape != want {
                return Err(GlitterError::Schema(format!(
                    "checkpoint tensor {name} has shape {}x{}, configuration expects {}x{}",
                    shape.0, shape.1, want.0, want.1
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.params)
    }
}

/// SHA-256 over the little-endian bytes of every parameter.
pub fn fingerprint(params: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, shape, values) in params.tensors() {
        hasher.update(name.as_bytes());
        hasher.update((shape.0 as u64).to_le_bytes());
        hasher.update((shape.1 as u64).to_le_bytes());
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let config =
        serde_json::to_string(&ckpt.config).map_err(|e| GlitterError::arg(e.to_string()))?;
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "feature_dim {}", ckpt.feature_dim).unwrap();
    writeln!(out, "config {config}").unwrap();
    writeln!(out, "rng_state {}", ckpt.rng_state).unwrap();
    for (name, (rows, cols), values) in ckpt.params.tensors() {
        writeln!(out, "tensor {name} {rows} {cols}").unwrap();
        for r in 0..rows {
            let line: Vec<String> = (0..cols)
                .map(|c| format!("{:.16e}", values[c * rows + r]))
                .collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    writeln!(out, "end").unwrap();
    fs::write(path, out).map_err(|e| GlitterError::io(path, e))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    file: String,
    last: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, line)) => {
                self.last = i + 1;
                Ok(line)
            }
            None => Err(self.err(format!("file ends before {what}"))),
        }
    }

    fn err(&self, message: String) -> GlitterError {
        GlitterError::Parse {
            record: format!("{}:{}", self.file, self.last),
            message,
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next(key)?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| GlitterError::io(path, e))?;
    let mut rd = Reader {
        lines: text.lines().enumerate(),
        file: path.display().to_string(),
        last: 0,
    };
    if rd.next("header")? != MAGIC {
        return Err(rd.err(format!("missing `{MAGIC}` header")));
    }
    let feature_dim: usize = rd
        .keyed("feature_dim")?
        .trim()
        .parse()
        .map_err(|e| rd.err(format!("bad feature_dim: {e}")))?;
    let config_text = rd.keyed("config")?;
    let config: TrainConfig = serde_json::from_str(config_text)
        .map_err(|e| rd.err(format!("bad config snapshot: {e}")))?;
    let rng_state = rd.keyed("rng_state")?.to_string();

    let expected = Checkpoint::expected_shapes(&config, feature_dim);
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, want) in crate::objective::TENSOR_NAMES.iter().zip(expected) {
        let header = rd.keyed("tensor")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != *name {
            return Err(rd.err(format!("expected header `tensor {name} <rows> <cols>`")));
        }
        let rows: usize = parts[1]
            .parse()
            .map_err(|e| rd.err(format!("bad row count: {e}")))?;
        let cols: usize = parts[2]
            .parse()
            .map_err(|e| rd.err(format!("bad column count: {e}")))?;
        if (rows, cols) != want {
            return Err(GlitterError::Schema(format!(
                "tensor {name} is {rows}x{cols} but the stored configuration implies {}x{}",
                want.0, want.1
            )));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let line = rd.next(name)?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| rd.err(format!("bad value in {name}: {e}")))?;
            if vals.len() != cols {
                return Err(rd.err(format!(
                    "{name} row has {} values, expected {cols}",
                    vals.len()
                )));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(rd.err(format!("non-finite value in {name}")));
            }
            for (c, v) in vals.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        tensors.push(m);
    }
    if rd.next("end marker")? != "end" {
        return Err(rd.err("expected `end`".into()));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let structure = StructureParams {
        w1: next(),
        w2: next(),
        psi: DVector::from_column_slice(next().as_slice()),
    };
    let encoder = EncoderParams {
        gcn_w1: next(),
        gcn_w2: next(),
        clf_w: next(),
        clf_b: DVector::from_column_slice(next().as_slice()),
    };
    Ok(Checkpoint {
        params: ParamSet { structure, encoder },
        config,
        feature_dim,
        rng_state,
    })
}
