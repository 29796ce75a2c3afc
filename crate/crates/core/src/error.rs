use thiserror::Error;

/// Errors raised by the simulation, analysis and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error ({key}): {message}")]
    Config { key: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite state in particle {particle} at t = {time}")]
    BlowUp { particle: usize, time: f64 },

    #[error("replay error: {0}")]
    Replay(String),

    #[error("overflow before re-orthonormalization at t = {time}; use a smaller reorth_every")]
    Overflow { time: f64 },

    #[error("replica {replica}: {source}")]
    InReplica {
        replica: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn in_replica(self, replica: usize) -> Self {
        Error::InReplica {
            replica,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag used in failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Domain(_) => "domain",
            Error::BlowUp { .. } => "blow_up",
            Error::Replay(_) => "replay",
            Error::Overflow { .. } => "overflow",
            Error::InReplica { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
