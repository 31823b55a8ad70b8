use thiserror::Error;

/// Crate-wide error type.
///
/// `exit_code` defines the process status used by the CLI: 2 for
/// configuration errors, 3 for data errors, 4 for numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The log map is undefined on rotations at the cut locus; callers get an
    /// error instead of a wrapped or sign-flipped angle.
    #[error("log map undefined: rotation angle {angle} is within tolerance of +/-pi")]
    LogSingularity { angle: f64 },

    /// Every correspondence weight vanished (trimming, robust weights, or
    /// prior weights), so no update direction exists.
    #[error("no effective correspondences at iteration {iteration}: total weight is zero")]
    NoEffectiveCorrespondences { iteration: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::DimensionMismatch(_) => 3,
            Error::LogSingularity { .. }
            | Error::NoEffectiveCorrespondences { .. }
            | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
