use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset root {root} has {found} class folder(s) with images, need at least 2")]
    EmptyDataset { root: PathBuf, found: usize },

    #[error("cannot read dataset root {path}: {source}")]
    UnreadableRoot {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("class {class} has {count} sample(s), cannot populate train/val/test")]
    ClassTooSmall { class: usize, count: usize },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("malformed manifest line {line}: {content:?}")]
    MalformedLine { line: usize, content: String },

    #[error("label {label} out of range for {classes} classes{}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        line: Option<usize>,
    },

    #[error("cannot decode image {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },

    #[error("image {height}x{width} is smaller than crop window {window}")]
    ImageTooSmall {
        height: u32,
        width: u32,
        window: u32,
    },

    #[error("input {height}x{width} is too small, need at least {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("window {rows}x{cols} does not fit a {map_rows}x{map_cols} feature map")]
    WindowTooLarge {
        rows: usize,
        cols: usize,
        map_rows: usize,
        map_cols: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("class {0} does not occur in the ground truth")]
    EmptyClass(usize),

    #[error("ensemble members disagree: {0}")]
    MemberMismatch(String),

    #[error("invalid probability matrix: {0}")]
    InvalidProbabilities(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (state dumped to {dump})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },

    #[error("label space mismatch: {0}")]
    LabelSpaceMismatch(String),

    #[error("model does not expose layer {0} for gradient capture")]
    UnsupportedLayer(String),

    #[error("cannot write {path}: {reason}")]
    WriteFailure { path: PathBuf, reason: String },

    #[error("results ledger {0} has no rows")]
    EmptyLedger(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
