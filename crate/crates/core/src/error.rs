use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("self-loop on unit `{0}`")]
    SelfLoop(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("required structure missing: {0}")]
    StructureMissing(String),
    #[error("exposure is not absorbing for unit `{unit}` (reverts at time {time})")]
    NotAbsorbing { unit: String, time: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("blip spec parse error at {line}:{column}: {message}")]
    SpecParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("term `{term}` references data after time m ({detail})")]
    Leakage { term: String, detail: String },
    #[error("term `{0}` has no exposure factor at time m, so the blip would not vanish at zero exposure")]
    ZeroConstraintViolation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parameters not identified on this data: {message}")]
    Identification { message: String, directions: Vec<String> },
    #[error("positivity violation at time {time}: stratum {stratum} has no unit with zero exposure")]
    Positivity { time: usize, stratum: String },
    #[error("saturated nuisance strategy needs discrete histories: {0}")]
    ContinuousHistory(String),
    #[error("Jacobian is singular")]
    JacobianSingular,
    #[error("empty subgroup: {0}")]
    EmptySubgroup(String),
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("too many failed replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnbalancedPanel(_) => "UnbalancedPanel",
            Error::Parse { .. } => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::UnknownUnit(_) => "UnknownUnit",
            Error::SelfLoop(_) => "SelfLoop",
            Error::InvalidSize(_) => "InvalidSize",
            Error::StructureMissing(_) => "StructureMissing",
            Error::NotAbsorbing { .. } => "NotAbsorbing",
            Error::Index(_) => "IndexError",
            Error::SpecParse { .. } => "SpecParseError",
            Error::Leakage { .. } => "LeakageError",
            Error::ZeroConstraintViolation(_) => "ZeroConstraintViolation",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::Identification { .. } => "IdentificationError",
            Error::Positivity { .. } => "PositivityViolation",
            Error::ContinuousHistory(_) => "ContinuousHistory",
            Error::JacobianSingular => "JacobianSingular",
            Error::EmptySubgroup(_) => "EmptySubgroup",
            Error::Bootstrap(_) => "BootstrapError",
            Error::Config(_) => "ConfigError",
            Error::TooManyFailures { .. } => "TooManyFailures",
            Error::Io(_) => "IoError",
        }
    }

    /// True for failures of the input data or configuration, as opposed to
    /// failures of the estimation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::UnbalancedPanel(_)
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::UnknownUnit(_)
                | Error::SelfLoop(_)
                | Error::InvalidSize(_)
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
