use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate axis in {op}: last extent {extent} < 2")]
    DegenerateAxis { op: &'static str, extent: usize },

    #[error("softmax row {row} has no finite entries")]
    AllMasked { row: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("action at {action_ts} is after reference time {ref_time}")]
    TemporalOrder { action_ts: i64, ref_time: i64 },

    #[error("no actions available at or before {0}")]
    EmptyInput(i64),

    #[error("batch has no contributing (position, target) pairs")]
    SkipBatch,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("operator graph: {0}")]
    Graph(String),

    #[error("cycle in operator graph through node `{0}`")]
    Cycle(String),

    #[error("placement: {0}")]
    Placement(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
