use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty scribble")]
    EmptyScribble,
    #[error("empty point set: {0}")]
    EmptySet(&'static str),
    #[error("degenerate mask")]
    DegenerateMask,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("grid dimensions do not match: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid scribble: {0}")]
    InvalidScribble(String),
    #[error("nothing to edit")]
    NothingToEdit,
    #[error("no candidate edits")]
    NoCandidateEdits,
    #[error("unknown frame {0}")]
    UnknownFrame(usize),
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("no predicted surface")]
    NoPredictedSurface,
    #[error("numerical failure at epoch {epoch}, sample {sample}: {detail}")]
    Divergence {
        epoch: usize,
        sample: usize,
        detail: String,
    },
    #[error("missing activation cache: run a forward pass with caching first")]
    MissingCache,
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("truncated file {name}: expected {expected} bytes, found {found}")]
    Truncated {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("missing member: {0}")]
    MissingMember(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("output directory {0} exists and is not empty")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures are reported separately from config and IO errors.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
