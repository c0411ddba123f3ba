use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum FclError {
    /// Invalid or inconsistent configuration (bad key, out-of-range value, shape mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// The generated workload is inconsistent with how it is being used.
    #[error("workload error: {0}")]
    Workload(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Violation of the federator/client contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: usize,
        client: usize,
        #[source]
        source: Box<FclError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FclError {
    pub fn config(msg: impl Into<String>) -> Self {
        FclError::Config(msg.into())
    }

    pub fn workload(msg: impl Into<String>) -> Self {
        FclError::Workload(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        FclError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FclError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration, 3 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            FclError::Config(_) => 2,
            FclError::Io { .. } => 3,
            FclError::Round { source, .. } => match source.as_ref() {
                FclError::Config(_) => 2,
                FclError::Io { .. } => 3,
                _ => 1,
            },
            _ => 1,
        }
    }
}

pub type Result<T, E = FclError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let io = FclError::io("x", std::io::Error::other("boom"));
        assert_eq!(FclError::config("k").exit_code(), 2);
        assert_eq!(io.exit_code(), 3);
        assert_eq!(FclError::numeric("nan").exit_code(), 1);
        assert_eq!(FclError::workload("w").exit_code(), 1);
        let wrapped = FclError::Round {
            round: 3,
            client: 1,
            source: Box::new(FclError::numeric("inf")),
        };
        assert_eq!(wrapped.exit_code(), 1);
        assert!(wrapped.to_string().contains("round 3, client 1"));
    }
}
