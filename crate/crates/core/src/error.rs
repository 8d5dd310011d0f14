use std::fmt;

/// Errors raised by the analysis engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic bytes: expected LUNATRC1")]
    BadMagic,
    #[error("corrupt container header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("invalid container: {0}")]
    InvalidContainer(String),
    #[error("trace {0} has neither a trace label nor state semantics")]
    MissingLabel(usize),
    #[error("split index {index} out of range for {len} traces")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("split index {0} appears in both train and test")]
    Overlap(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("trace too short: need {needed} positions, got {got}")]
    TraceTooShort { needed: usize, got: usize },
    #[error("too few distinct rows: requested {requested} states, {distinct} distinct rows")]
    TooFewDistinctRows { requested: usize, distinct: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("observation {0} is not in the training alphabet")]
    UnknownObservation(u64),
    #[error("semantics misaligned: {0}")]
    MisalignedSemantics(String),
    #[error("binding is in {0} mode")]
    WrongMode(String),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("no valid positions for surprise computation")]
    NoValidPositions,
    #[error("input is constant")]
    ConstantInput,
    #[error("all pairs tied")]
    AllTied,
    #[error("unknown metric: {0}")]
    UnknownMetric(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic source spec: {0}")]
    InvalidSpec(String),
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage used to tag propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Reduction,
    Partition,
    Model,
    Binding,
    Metrics,
    Detection,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Reduction => "reduction",
            Stage::Partition => "partition",
            Stage::Model => "model",
            Stage::Binding => "binding",
            Stage::Metrics => "metrics",
            Stage::Detection => "detection",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

/// Broad error class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::UnknownMetric(_) => {
                ErrorKind::Config
            }
            Error::Serialization(_) => ErrorKind::Config,
            Error::ZeroDenominator => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
