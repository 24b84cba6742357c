//! Multi-graph datasets and their on-disk directory format.
//!
//! A dataset directory holds a `meta` file plus one `graph_<i>.txt` per graph:
//!
//! ```text
//! # meta
//! name sbm
//! feature_dim 4
//! classes 0 1 2
//! graphs 1
//!
//! # graph_0.txt
//! graph_id 0
//! nodes 3
//! edges 2
//! 0 1
//! 1 2
//! features
//! 0.5 -1 0 2
//! ...            (one row per node)
//! labels
//! 0
//! null
//! ...            (one line per node)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `load(save(d)) == d` holds exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{GlitterError, Result};
use crate::graph::{ClassId, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub class_universe: Vec<ClassId>,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        class_universe: Vec<ClassId>,
        graphs: Vec<Graph>,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(GlitterError::Schema("dataset contains no graphs".into()));
        }
        let mut universe = class_universe;
        universe.sort_unstable();
        universe.dedup();
        let known: BTreeSet<ClassId> = universe.iter().copied().collect();
        for g in &graphs {
            if g.feature_dim() != feature_dim {
                return Err(GlitterError::Schema(format!(
                    "graph {} has feature dimension {}, dataset declares {feature_dim}",
                    g.id(),
                    g.feature_dim()
                )));
            }
            if let Some(c) = g.labels().iter().flatten().find(|c| !known.contains(c)) {
                return Err(GlitterError::Schema(format!(
                    "graph {} uses class {c} outside the class universe",
                    g.id()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            feature_dim,
            class_universe: universe,
            graphs,
        })
    }

    pub fn graph(&self, graph_id: usize) -> Option<&Graph> {
        self.graphs.iter().find(|g| g.id() == graph_id)
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GlitterError::io(dir, e))?;
    let mut meta = String::new();
    writeln!(meta, "name {}", dataset.name).unwrap();
    writeln!(meta, "feature_dim {}", dataset.feature_dim).unwrap();
    let classes: Vec<String> = dataset
        .class_universe
        .iter()
        .map(|c| c.to_string())
        .collect();
    writeln!(meta, "classes {}", classes.join(" ")).unwrap();
    writeln!(meta, "graphs {}", dataset.graphs.len()).unwrap();
    let path = dir.join("meta");
    fs::write(&path, meta).map_err(|e| GlitterError::io(&path, e))?;

    for (i, g) in dataset.graphs.iter().enumerate() {
        let path = dir.join(format!("graph_{i}.txt"));
        fs::write(&path, render_graph(g)).map_err(|e| GlitterError::io(&path, e))?;
    }
    Ok(())
}

fn render_graph(g: &Graph) -> String {
    let mut s = String::new();
    writeln!(s, "graph_id {}", g.id()).unwrap();
    writeln!(s, "nodes {}", g.node_count()).unwrap();
    writeln!(s, "edges {}", g.edges().len()).unwrap();
    for (u, v) in g.edges() {
        writeln!(s, "{u} {v}").unwrap();
    }
    s.push_str("features\n");
    for row in g.features().row_iter() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(s, "{}", vals.join(" ")).unwrap();
    }
    s.push_str("labels\n");
    for l in g.labels() {
        match l {
            Some(c) => writeln!(s, "{c}").unwrap(),
            None => s.push_str("null\n"),
        }
    }
    s
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| GlitterError::io(&meta_path, e))?;
    let mut lines = Lines::new("meta", &text);
    let name = lines.keyed("name")?.to_string();
    let feature_dim: usize = lines.keyed_parse("feature_dim")?;
    let classes_line = lines.keyed("classes")?;
    let classes = classes_line
        .split_whitespace()
        .map(|t| lines.parse_token::<ClassId>(t))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = lines.keyed_parse("graphs")?;
    if count == 0 {
        return Err(GlitterError::Schema(
            "dataset meta declares zero graphs".into(),
        ));
    }

    let mut graphs = Vec::with_capacity(count);
    for i in 0..count {
        let file = format!("graph_{i}.txt");
        let path = dir.join(&file);
        let text = fs::read_to_string(&path).map_err(|e| GlitterError::io(&path, e))?;
        graphs.push(parse_graph(&file, &text, feature_dim)?);
    }
    Dataset::new(name, feature_dim, classes, graphs)
}

fn parse_graph(file: &str, text: &str, feature_dim: usize) -> Result<Graph> {
    let mut lines = Lines::new(file, text);
    let graph_id: usize = lines.keyed_parse("graph_id")?;
    let n: usize = lines.keyed_parse("nodes")?;
    let m: usize = lines.keyed_parse("edges")?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let line = lines.next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(lines.error("expected an edge `u v`"));
        }
        edges.push((lines.parse_token(toks[0])?, lines.parse_token(toks[1])?));
    }
    lines.expect("features")?;
    let mut data = Vec::with_capacity(n * feature_dim);
    for _ in 0..n {
        let line = lines.next_line()?;
        let row = line
            .split_whitespace()
            .map(|t| lines.parse_token::<f64>(t))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != feature_dim {
            return Err(GlitterError::Schema(format!(
                "{}: feature row has {} values, expected {feature_dim}",
                lines.location(),
                row.len()
            )));
        }
        data.extend(row);
    }
    lines.expect("labels")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next_line()?;
        labels.push(match line {
            "null" => None,
            t => Some(lines.parse_token::<ClassId>(t)?),
        });
    }
    let features = DMatrix::from_row_slice(n, feature_dim, &data);
    Graph::new(graph_id, edges, features, labels)
}

/// Line cursor that skips blanks and `#` comments and remembers where it is
/// for error messages.
struct Lines<'a> {
    file: &'a str,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn new(file: &'a str, text: &'a str) -> Self {
        Self {
            file,
            inner: text.lines().enumerate().peekable(),
            line_no: 0,
        }
    }

    fn location(&self) -> String {
        format!("{}:{}", self.file, self.line_no)
    }

    fn error(&self, message: impl Into<String>) -> GlitterError {
        GlitterError::Parse {
            record: self.location(),
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        for (i, raw) in self.inner.by_ref() {
            self.line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok(line);
        }
        self.line_no += 1;
        Err(self.error("unexpected end of file"))
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let line = self.next_line()?;
        if line != word {
            return Err(self.error(format!("expected `{word}`, found `{line}`")));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        match line.split_once(char::is_whitespace) {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            None if line == key => Ok(""),
            _ => Err(self.error(format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        self.parse_token(v)
    }

    fn parse_token<T: std::str::FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| self.error(format!("cannot parse `{tok}`")))
    }
}
