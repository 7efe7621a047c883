use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("interval bound order violated at flat index {index}: lower {lower} > upper {upper}")]
    BoundOrder { index: usize, lower: f64, upper: f64 },

    #[error("empty intersection at coordinate(s) {coords:?}")]
    EmptyIntersection { coords: Vec<usize> },

    #[error("negative activation lower bound at index {index}: {value}")]
    NegativeActivation { index: usize, value: f64 },

    #[error("label {label} is not a valid class index for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("non-finite value in {component}: {value}")]
    NonFinite { component: String, value: f64 },

    #[error("non-finite loss for more than {limit} consecutive iterations (task {task}, iteration {iteration}): {diagnostic}")]
    NonFiniteStreak {
        task: usize,
        iteration: usize,
        limit: usize,
        diagnostic: String,
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unsupported primitive in recorded graph: {0}")]
    UnsupportedPrimitive(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("task {task} has not been trained yet (trained: {trained})")]
    UntrainedTask { task: usize, trained: usize },

    #[error("missing regularization snapshot for task {0}")]
    MissingSnapshot(usize),

    #[error("accuracy matrix incomplete: row {row} has {got} entries, expected {expected}")]
    IncompleteMatrix {
        row: usize,
        got: usize,
        expected: usize,
    },

    #[error("bad magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("truncated file {path}: needed {needed} bytes, had {had}")]
    Truncated {
        path: String,
        needed: usize,
        had: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid class split: {0}")]
    BadSplit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown verification suite {0:?}")]
    UnknownSuite(String),

    #[error("incomplete run directory: missing {0}")]
    IncompleteRun(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
