use std::path::PathBuf;

/// Coarse classification of failures, used by the CLI to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad user configuration or arguments.
    Config,
    /// Inputs on disk are missing, malformed, or inconsistent.
    Data,
    /// A computation could not complete (divergence, incomplete session).
    Stage,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("cosine similarity undefined for an all-zero vector")]
    ZeroVector,
    #[error("sequence is empty")]
    EmptySequence,
    #[error("frame has {points} points, fewer than the {clusters} requested clusters")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("diversity scoring needs at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame budget {budget} exceeds pool of {pool} frames")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("invalid cluster count k={k} for {points} points")]
    BadK { k: usize, points: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("frame {0} has no ground-truth labels")]
    NoGroundTruth(String),
    #[error("annotation session for frame {frame_id} incomplete: {answered}/{queued} clicks")]
    SessionIncomplete {
        frame_id: String,
        answered: usize,
        queued: usize,
    },
    #[error("class id {class} out of range for {num_classes} classes")]
    InvalidClass { class: u32, num_classes: usize },
    #[error("point index {index} out of range for {points} points")]
    InvalidPoint { index: usize, points: usize },
    #[error("batch contains no labeled points")]
    AllUnlabeled,
    #[error("training requires at least one labeled frame")]
    NoLabeledData,
    #[error("non-finite loss in stage {stage} at epoch {epoch}")]
    NonFiniteLoss { stage: u8, epoch: usize },
    #[error("unknown frame {0}")]
    UnknownFrame(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::BudgetExceedsPool { .. } | Error::BadK { .. } => {
                ErrorClass::Config
            }
            Error::Io { .. }
            | Error::MalformedFile { .. }
            | Error::DimMismatch { .. }
            | Error::LengthMismatch { .. }
            | Error::ZeroVector
            | Error::EmptySequence
            | Error::TooFewPoints { .. }
            | Error::Degenerate(_)
            | Error::TooFewFrames(_)
            | Error::EmptyCluster(_)
            | Error::NoGroundTruth(_)
            | Error::InvalidClass { .. }
            | Error::InvalidPoint { .. }
            | Error::UnknownFrame(_)
            | Error::MissingArtifact(_) => ErrorClass::Data,
            Error::SessionIncomplete { .. }
            | Error::AllUnlabeled
            | Error::NoLabeledData
            | Error::NonFiniteLoss { .. } => ErrorClass::Stage,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
