//! Backend selection shared by the command line and the test suites.

use serde::Serialize;

use crate::bsde::{TruncationConfig, TruncationMode};
use crate::equilibrium::Backend;
use crate::error::Result;
use crate::field::{auto_truncation_from, solve_fields, Grid, GridSpec};
use crate::market_model::{probe_mesh, validate_model, MarketModel};
use crate::ode::{min_stable_steps, solve_constant};

#[derive(Debug, Clone)]
pub struct Solved {
    pub backend: Backend,
    /// Spatial grid; `None` for the constant-coefficient backend.
    pub grid: Option<Grid>,
    pub truncation: Option<TruncationConfig>,
    /// Change of the fields under one more doubling of the truncation level.
    pub doubled_change: Option<f64>,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub backend: &'static str,
    pub n_steps: usize,
    pub requested_n_steps: usize,
    pub d_min: Option<f64>,
    pub d_max: Option<f64>,
    pub n_space: Option<usize>,
    pub truncation_n: Option<u32>,
    pub doubled_change: Option<f64>,
}

/// Solves with the ODE backend when the coefficients are constant and with
/// the finite-difference backend otherwise.
pub fn solve(model: &MarketModel, spec: &GridSpec, truncation: &TruncationConfig) -> Result<Solved> {
    if model.is_constant() {
        let wide = spec.coverage_k * model.bound_m * model.horizon.sqrt();
        validate_model(model, &probe_mesh(model, model.d0 - wide, model.d0 + wide, 3, 3))?;
        let n_steps = spec.n_time.max(min_stable_steps(model)?);
        return Ok(Solved {
            backend: Backend::Constant(solve_constant(model, n_steps)?),
            grid: None,
            truncation: None,
            doubled_change: None,
            n_steps,
        });
    }
    let grid = Grid::build(model, spec)?;
    let (field, config, change) = match truncation.mode {
        TruncationMode::Auto => {
            let out = auto_truncation_from(model, &grid, truncation.n, truncation.n_max)?;
            (out.field, out.config, Some(out.doubled_change))
        }
        TruncationMode::Fixed => (solve_fields(model, &grid, truncation)?, *truncation, None),
    };
    Ok(Solved {
        n_steps: grid.n_time,
        backend: Backend::Field(field),
        grid: Some(grid),
        truncation: Some(config),
        doubled_change: change,
    })
}

impl Solved {
    pub fn summary(&self, requested_n_steps: usize) -> SolveSummary {
        SolveSummary {
            backend: self.backend.name(),
            n_steps: self.n_steps,
            requested_n_steps,
            d_min: self.grid.as_ref().map(|g| g.d_min),
            d_max: self.grid.as_ref().map(|g| g.d_max),
            n_space: self.grid.as_ref().map(|g| g.n_space),
            truncation_n: self.truncation.map(|t| t.n),
            doubled_change: self.doubled_change,
        }
    }
}
