use thiserror::Error;

use crate::forest::MortonKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("level {0} exceeds the maximum refinement level")]
    LevelTooDeep(usize),
    #[error("invalid brick: {0}")]
    InvalidBrick(String),
    #[error("flag given for {0:?}, which is not a leaf")]
    FlagOnNonLeaf(MortonKey),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A rank touched a cell it neither owns nor holds as a ghost.
    #[error("rank {rank} accessed cell {cell:?} outside its local and ghost set")]
    Guard { rank: usize, cell: MortonKey },

    #[error("rank {rank}: owner recursion deeper than one level at {vef} (balance precondition violated)")]
    OwnerRecursion { rank: usize, vef: String },
    #[error("rank {rank}: no matching face for {what}")]
    Unmatched { rank: usize, what: String },

    #[error("k = {k} exceeds max(1, D) = {limit} for this element; hanging constraints would not be local")]
    BalanceTooWeak { k: usize, limit: usize },
    #[error("rank {rank}: constraint of DOF at {node:?} needs cell {cell:?} outside the ghost layer")]
    NonLocalConstraint { rank: usize, node: [u64; 3], cell: MortonKey },
    #[error("rank {rank}: constraint of DOF at {node:?} depends on hanging DOF at {master:?}")]
    NonDirectConstraint { rank: usize, node: [u64; 3], master: [u64; 3] },
    #[error("rank {rank}: local VEF missing for node {node:?}")]
    MissingVef { rank: usize, node: [u64; 3] },

    #[error("message addressed from rank {src} to rank {dst}, but only {ranks} ranks exist")]
    BadDestination { src: usize, dst: usize, ranks: usize },
    #[error("rank {0} sent a message to itself")]
    SelfMessage(usize),
    #[error("expected {expected} per-rank values, got {got}")]
    RankCount { expected: usize, got: usize },
    #[error("malformed message: {0}")]
    Decode(String),

    #[error("rank {rank}: no remote owner received for DOF at {node:?}")]
    MissingRemote { rank: usize, node: [u64; 3] },
    #[error("vector length {got} does not match DOF count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("rank {rank}: injection into unallocated entry ({row}, {col})")]
    NoPatternEntry { rank: usize, row: u64, col: u64 },

    #[error("CG did not converge in {0} iterations")]
    NotConverged(usize),
    #[error("operator is not positive definite (p'Ap = {0})")]
    NotPositiveDefinite(f64),

    #[error("invalid forest file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Unwraps stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
