use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not an embedding file (bad magic)")]
    BadMagic,

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("truncated file: header implies {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroVector { row: usize },

    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },

    #[error("{}: no such file", .0.display())]
    BadPath(PathBuf),

    #[error("i/o failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("count mismatch: {what} has {found} entries, expected {expected}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate record id {0}")]
    DuplicateId(u64),

    #[error("malformed metadata at line {line}: {reason}")]
    MalformedMetadata { line: usize, reason: String },

    #[error("malformed class set: {0}")]
    MalformedClassSet(String),

    #[error("class set needs at least 2 classes, found {0}")]
    TooFewClasses(usize),

    #[error("malformed index file: {0}")]
    MalformedIndex(String),

    #[error("cannot build an index over an empty matrix")]
    EmptyMatrix,

    #[error("space {0:?} is not normalized; cosine search requires unit vectors")]
    UnnormalizedSpace(String),

    #[error("query is not a unit vector (norm {norm})")]
    UnnormalizedQuery { norm: f64 },

    #[error("missing embedding space {0:?}")]
    MissingSpace(String),

    #[error("no coarse candidates to fine-retrieve from")]
    EmptyCandidates,

    #[error("no captions to build a text-modal prediction from")]
    EmptyCaptions,

    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),

    #[error("k = {k} exceeds n = {n}")]
    KExceedsN { k: usize, n: usize },

    #[error("test set has no labels")]
    MissingLabels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid ensemble state: {0}")]
    InvalidState(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::BadPath(path)
        } else {
            Error::IoFailure { path, source }
        }
    }
}
