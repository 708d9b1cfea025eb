//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter sets that cannot describe a frame (zero symbols, rate
    /// mismatch, intervals of zero, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Payload length does not match the number of data cells.
    #[error("payload size mismatch: expected {expected} bits, got {got}")]
    PayloadSize { expected: usize, got: usize },

    /// Bit vectors fed to the QPSK mapper must have even length.
    #[error("QPSK mapping requires an even number of bits, got {0}")]
    OddBitCount(usize),

    /// Bit values other than 0/1.
    #[error("payload bits must be 0 or 1, found {0}")]
    InvalidBit(u8),

    /// Signal shorter than what an operation needs to read.
    #[error("signal too short: need {needed} samples from offset {offset}, have {available}")]
    SignalTooShort {
        needed: usize,
        offset: usize,
        available: usize,
    },

    /// Grid dimensions disagree between operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A transmit cell is zero where a division is required.
    #[error("zero transmit symbol at cell ({n}, {m})")]
    ZeroTransmitCell { n: usize, m: usize },

    /// Path delay exceeds what the signal block can represent.
    #[error("path delay of {delay_samples:.1} samples exceeds block of {block_len}")]
    DelayTooLong { delay_samples: f64, block_len: usize },

    /// Requested SINR override cannot be met with the configured noise floor.
    #[error("SINR override of {requested_db:.1} dB infeasible: bistatic power {bi_power_dbm:.1} dBm vs noise {noise_dbm:.1} dBm")]
    OverrideInfeasible {
        requested_db: f64,
        bi_power_dbm: f64,
        noise_dbm: f64,
    },

    /// Preamble correlation metric never crossed the detection threshold.
    #[error("synchronization failed: {0}")]
    SyncDetectionFailed(String),

    /// Integer CFO correlation has no sufficiently unique maximum.
    #[error("integer CFO ambiguous: best {best_db:.2} dB vs runner-up {runner_up_db:.2} dB (margin < {margin_db:.1} dB)")]
    IntegerCfoAmbiguous {
        best_db: f64,
        runner_up_db: f64,
        margin_db: f64,
    },

    /// Peak detection asked for on an empty or fully excluded map.
    #[error("noise region is empty")]
    EmptyNoiseRegion,

    /// Scenario file could not be parsed.
    #[error("scenario parse error: {0}")]
    ScenarioParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
