use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped by the module that raises them; the CLI maps each
/// variant onto an exit code through [`Error::exit_code`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // measures
    #[error("simplex violation: {0}")]
    SimplexViolation(String),
    #[error("mass violation: {0}")]
    MassViolation(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("psi-bar is only defined for Lambda-type measures")]
    BarUnsupported,
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("merger rate overflow at b = {0}")]
    RateOverflow(usize),

    // speed
    #[error("time {t} exceeds the horizon {horizon} at which v^n reaches 1")]
    HorizonExceeded { t: f64, horizon: f64 },

    // simulator
    #[error("stop rule tau-star requires gamma > 0")]
    GammaZeroWithTauStar,
    #[error("unsupported measure: {0}")]
    UnsupportedMeasure(String),
    #[error("event cap of {0} exceeded before the stop rule was met")]
    NonTermination(u64),
    #[error("unknown lineage id {0}")]
    UnknownLineage(u32),
    #[error("lineage {0} is not active")]
    InactiveLineage(u32),
    #[error("event time {time} precedes previous event time {previous}")]
    NonmonotoneTime { time: f64, previous: f64 },

    // statistics / ewens
    #[error("beta must lie in (0,1), got {0}")]
    BadBeta(f64),
    #[error("bad configuration: {0}")]
    BadConfiguration(String),
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("n = {0} is too large for exhaustive enumeration (cap 30)")]
    TooLarge(usize),

    // experiments
    #[error("replicates must be at least 1")]
    ZeroReplicates,
    #[error("check requires a measure that comes down from infinity")]
    CdiRequired,

    // cli / io
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short variant name, used in the machine-parsable CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SimplexViolation(_) => "SimplexViolation",
            Error::MassViolation(_) => "MassViolation",
            Error::BadParameter(_) => "BadParameter",
            Error::BarUnsupported => "BarUnsupported",
            Error::QuadratureFailure(_) => "QuadratureFailure",
            Error::RateOverflow(_) => "RateOverflow",
            Error::HorizonExceeded { .. } => "HorizonExceeded",
            Error::GammaZeroWithTauStar => "GammaZeroWithTauStar",
            Error::UnsupportedMeasure(_) => "UnsupportedMeasure",
            Error::NonTermination(_) => "NonTermination",
            Error::UnknownLineage(_) => "UnknownLineage",
            Error::InactiveLineage(_) => "InactiveLineage",
            Error::NonmonotoneTime { .. } => "NonmonotoneTime",
            Error::BadBeta(_) => "BadBeta",
            Error::BadConfiguration(_) => "BadConfiguration",
            Error::BadGamma(_) => "BadGamma",
            Error::TooLarge(_) => "TooLarge",
            Error::ZeroReplicates => "ZeroReplicates",
            Error::CdiRequired => "CDIRequired",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }

    /// 2 config error, 3 numeric failure, 4 unsupported measure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::QuadratureFailure(_)
            | Error::RateOverflow(_)
            | Error::HorizonExceeded { .. }
            | Error::NonTermination(_) => 3,
            Error::UnsupportedMeasure(_) | Error::BarUnsupported | Error::CdiRequired => 4,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
