//! Utility indifference pricing and hedging under small proportional
//! transaction costs: asymptotic expansion, reference HJB solver,
//! Monte Carlo simulator and a posteriori verifier.

pub mod bs_engine;
pub mod error;
pub mod expansion;
pub mod hjb_oracle;
pub mod market_model;
pub mod quad;
pub mod simulator;
pub mod verifier;

pub use error::{Error, Result};
