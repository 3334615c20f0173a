//! Solver and verifier for a two-agent Radner equilibrium with limited stock
//! market participation and exponential preferences.
//!
//! The equilibrium is characterised by a coupled quadratic BSDE for the log
//! annuity price `a` and the agents' certainty equivalents `Y1`, `Y2`. This
//! crate solves that system (closed ODE form for constant dividend
//! coefficients, explicit finite differences otherwise), builds prices,
//! wealth, consumption and the state price deflator along simulated paths,
//! and checks the equilibrium conditions by Monte Carlo.

pub mod bsde;
pub mod equilibrium;
pub mod error;
pub mod field;
pub mod market_model;
pub mod ode;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod verification;

pub use bsde::{BsdeState, DiagonalState, TruncationConfig, TruncationMode};
pub use equilibrium::{Backend, Ensemble, EquilibriumPath, FieldSource, ParetoBenchmark};
pub use error::{CoreError, Result};
pub use field::{Grid, GridSpec, SolutionField};
pub use market_model::{AgentParams, DividendPaths, DividendPreset, MarketModel};
pub use ode::ConstantSolution;
pub use pipeline::{solve, Solved, SolveSummary};
pub use stats::Estimate;
pub use verification::{CheckResult, Perturbation, VerificationReport, VerifyOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
