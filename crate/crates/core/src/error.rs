use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{what} is within the pole margin of the interpolation threshold (ratio {ratio:.4}, margin {margin})")]
    Pole {
        what: &'static str,
        ratio: f64,
        margin: f64,
    },

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl LabError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Dimension(_) | LabError::Toml(_) => 2,
            LabError::Numerical(_)
            | LabError::Pole { .. }
            | LabError::EmptyCluster(_)
            | LabError::Unsupported(_) => 3,
            LabError::Io(_) | LabError::Csv(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

pub(crate) fn dim_err(msg: impl Into<String>) -> LabError {
    LabError::Dimension(msg.into())
}
