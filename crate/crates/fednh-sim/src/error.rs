//! Error type shared across the simulator.

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum SimError {
    /// Invalid argument to a numerical routine.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration file or flag rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss or gradient became non-finite during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Failure while running the federated round loop.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<SimError>,
    },

    /// I/O failure while emitting artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Attach round context to an error propagating out of the round loop.
    pub fn in_round(self, round: usize) -> SimError {
        SimError::Round {
            round,
            source: Box::new(self),
        }
    }
}
