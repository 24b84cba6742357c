use thiserror::Error;

use crate::trainer::InnerTrace;

pub type Result<T> = std::result::Result<T, GlitterError>;

#[derive(Debug, Error)]
pub enum GlitterError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sampling error on graph {graph_id}{}: {message}", class_suffix(.class_id))]
    Sampling {
        graph_id: usize,
        class_id: Option<u32>,
        message: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged: {message}")]
    Training {
        message: String,
        trace: Box<InnerTrace>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn class_suffix(class_id: &Option<u32>) -> String {
    match class_id {
        Some(c) => format!(" (class {c})"),
        None => String::new(),
    }
}

impl GlitterError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GlitterError::Argument(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        GlitterError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
