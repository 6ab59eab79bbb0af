use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hierarchy line {line}: cycle through label `{label}`")]
    Cycle { line: usize, label: String },

    #[error("hierarchy line {line}: label `{child}` already has parent `{existing}`, cannot also be a child of `{parent}`")]
    ConflictingParent {
        line: usize,
        child: String,
        existing: String,
        parent: String,
    },

    #[error("hierarchy line {line}: label name `{label}` is reserved or contains whitespace")]
    ReservedName { line: usize, label: String },

    #[error("hierarchy line {line}: expected `parent<TAB>child`, got `{content}`")]
    MalformedEdge { line: usize, content: String },

    #[error("hierarchy is empty")]
    EmptyHierarchy,

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("label set is inconsistent: `{label}` is present but its parent `{missing}` is not")]
    Inconsistent { label: String, missing: String },

    #[error("sequence does not match hierarchy: {0}")]
    SequenceMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of length {len} exceeds the limit of {max}")]
    Overlong { len: usize, max: usize },

    #[error("token id {id} is out of range for {size} classes")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("corpus is empty: {0}")]
    EmptyCorpus(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus line {line}: {msg}")]
    CorpusFormat { line: usize, msg: String },

    #[error("synthetic spec: {0}")]
    SynthSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
