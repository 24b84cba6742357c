//! Few-shot node classification with task-specific structure learning.
//!
//! For every N-way K-shot meta-task the pipeline selects a node subset around
//! the support nodes, learns a dense directed adjacency over it, trains that
//! structure with an influence loss and a transductive mutual-information
//! loss on an absorbing Markov chain, and meta-learns a small GCN encoder on
//! top of it.

pub mod checkpoint;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod influence;
pub mod mi;
pub mod model;
pub mod objective;
pub mod sbm;
pub mod structure;
pub mod trainer;
pub mod verify;

pub use error::{GlitterError, Result};
