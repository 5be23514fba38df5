use thiserror::Error;

/// Errors produced by the allocation model and its data pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("risk tolerance {rho:e} is below the minimum-variance risk {min_risk:e}")]
    InfeasibleRisk { rho: f64, min_risk: f64 },

    #[error("volatility matrix is singular after conditioning")]
    SingularVolatility,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-positive input: {0}")]
    NonPositiveInput(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: non-positive price {price}")]
    NonPositivePrice { line: u64, price: f64 },

    #[error("line {line}: timestamps for chain {chain} are not strictly increasing")]
    UnsortedTimestamps { line: u64, chain: String },

    #[error("chain {chain}: no price at series start {timestamp}")]
    LeadingGap { chain: String, timestamp: i64 },

    #[error("chain {chain}: {hours} consecutive missing hours ending at {timestamp} (limit {limit})")]
    GapTooLong {
        chain: String,
        timestamp: i64,
        hours: usize,
        limit: usize,
    },

    #[error("line {line}: unknown chain {chain:?}")]
    UnknownChain { line: u64, chain: String },

    #[error("line {line}: duplicate block {chain}#{height}")]
    DuplicateBlock { line: u64, chain: String, height: u64 },

    #[error("chain {chain}: no difficulty sample at or before {timestamp}")]
    MissingDifficulty { chain: String, timestamp: i64 },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("unknown miner {0:?}")]
    UnknownMiner(String),

    #[error("empty input")]
    EmptyInput,

    #[error("total hash weight is zero")]
    ZeroTotalWeight,

    #[error("allocation to chain {chain} after the period is zero; inter-block time is unbounded")]
    ZeroAllocationAfter { chain: usize },

    #[error("series has zero variance")]
    DegenerateVariance,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::NonPositivePrice { .. }
                | Error::UnsortedTimestamps { .. }
                | Error::LeadingGap { .. }
                | Error::GapTooLong { .. }
                | Error::UnknownChain { .. }
                | Error::DuplicateBlock { .. }
                | Error::NonPositiveInput(_)
                | Error::NonFiniteInput(_)
                | Error::DimensionMismatch { .. }
                | Error::Config(_)
        )
    }

    /// True for errors caused by data that is well-formed but too short or too sparse.
    pub fn is_insufficient_data(&self) -> bool {
        matches!(
            self,
            Error::InsufficientHistory(_)
                | Error::UnknownMiner(_)
                | Error::MissingDifficulty { .. }
                | Error::EmptyInput
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
