use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rank deficient below k: requested {k}, numerical rank {rank}")]
    RankDeficient { k: usize, rank: usize },
    #[error("k = {k} exceeds min(rows, dim) = {max}")]
    KTooLarge { k: usize, max: usize },
    #[error("zero classifier")]
    ZeroClassifier,
    #[error("not a projector: {0}")]
    NotProjector(String),
    #[error("basis rows are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("unknown {kind}: {value:?}")]
    UnknownLabel { kind: &'static str, value: String },
    #[error("invalid lexicon {path}: {reason}")]
    Lexicon { path: String, reason: String },
    #[error("word {word:?} appears in more than one lexicon entry ({detail})")]
    DuplicateWord { word: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no attribute occurrences")]
    NoAttributeOccurrences,
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("DensRay is binary-only (got {0} classes)")]
    DensRayBinaryOnly(usize),
    #[error("need at least {needed} {what}, found {found}")]
    TooFew { what: &'static str, needed: usize, found: usize },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("fixture miss for key {key:?}")]
    FixtureMiss { key: String },
    #[error("scorer error [{code}] for request {req_id}: {detail}")]
    Scorer { req_id: String, code: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown projection handle {0:?}")]
    UnknownHandle(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
    #[error(transparent)]
    IoBare(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn read_to_string(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
