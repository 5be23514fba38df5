//! Hash-rate allocation across proof-of-work chains as a risk-constrained
//! portfolio problem.
//!
//! - [`portfolio`]: closed-form risk-constrained profit maximization.
//! - [`market`]: price/difficulty ingestion, profit vectors, rolling statistics.
//! - [`risk`]: observed allocations from blocks, inferred risk, parameter fitting.
//! - [`aggregate`]: hash-weighted aggregation, baselines, inter-block-time prediction.
//! - [`shock`]: Monte Carlo price-shock simulation against difficulty adjustment.

pub mod aggregate;
pub mod error;
pub mod market;
pub mod portfolio;
pub mod risk;
pub mod shock;

pub use error::{Error, Result};
pub use portfolio::{
    expected_profit, inferred_risk, min_variance_allocation, solve_max_profit, Allocation,
    ProfitVector, RiskTolerance, SolveFlags, SolveOutcome, SolvePolicy, VolatilityMatrix,
};
