//! Constant dividend coefficients: all volatility loadings vanish and the
//! BSDE reduces to a backward ODE system in time only.

use serde::Serialize;

use crate::bsde::{BsdeState, Preferences};
use crate::error::{CoreError, Result};
use crate::market_model::{uniform_times, MarketModel};

/// Largest `h * exp(-a)` accepted by the RK4 integrator (real-axis stability
/// limit is about 2.78).
const RK4_STABILITY: f64 = 2.5;

#[derive(Debug, Clone, Serialize)]
pub struct ConstantSolution {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Equilibrium short rate.
    pub r: f64,
    /// Equilibrium market price of risk.
    pub kappa: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl ConstantSolution {
    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, n: usize) -> BsdeState {
        BsdeState {
            a: self.a[n],
            y1: self.y1[n],
            y2: self.y2[n],
            ..BsdeState::default()
        }
    }
}

/// `(r, kappa, r_PE, kappa_PE)` for constant coefficients.
pub fn closed_form_constants(model: &MarketModel) -> Result<(f64, f64, f64, f64)> {
    let (mu, sigma) = model.dividend.constant_coefficients().ok_or(CoreError::WrongBackend)?;
    let (a_s, r_s, a1) = (model.alpha_sigma, model.rho_sigma, model.agent1.alpha);
    let s2 = sigma * sigma;
    let r = r_s + a_s * mu - 0.5 * a_s * a1 * s2;
    let kappa = a1 * sigma;
    let r_pe = r_s + a_s * mu - 0.5 * a_s * a_s * s2;
    let kappa_pe = a_s * sigma;
    Ok((r, kappa, r_pe, kappa_pe))
}

/// Fewest RK4 steps that keep `h exp(-a)` inside the stability region.
///
/// With `r` the short rate, `a' = r - exp(-a)` and `a(T) = 0` keep `a`
/// above `-ln(max(r, 1))` on the whole horizon.
pub fn min_stable_steps(model: &MarketModel) -> Result<usize> {
    let (r, ..) = closed_form_constants(model)?;
    let stiffness = r.max(1.0);
    Ok(((model.horizon * stiffness / RK4_STABILITY).ceil() as usize).max(2))
}

/// Backward classical RK4 for `(a, y2, y1)` from the zero terminal condition.
pub fn solve_constant(model: &MarketModel, n_steps: usize) -> Result<ConstantSolution> {
    let (mu, sigma) = model.dividend.constant_coefficients().ok_or(CoreError::WrongBackend)?;
    let min_steps = min_stable_steps(model)?;
    if n_steps < min_steps {
        return Err(CoreError::StepSize {
            reason: format!("{n_steps} RK4 steps cannot resolve the exp(-a) decay"),
            min_steps,
        });
    }
    let p = Preferences::from(model);
    let rhs = |u: [f64; 3]| -> [f64; 3] {
        let s = BsdeState {
            a: u[0],
            y2: u[1],
            y1: u[2],
            ..BsdeState::default()
        };
        [
            p.drift_a(mu, sigma, s.a, 0.0, 0.0),
            p.drift_y2(sigma, s.a, s.y2, 0.0),
            p.drift_y1(sigma, &s),
        ]
    };

    let times = uniform_times(model.horizon, n_steps);
    let h = model.horizon / n_steps as f64;
    let mut a = vec![0.0; n_steps + 1];
    let mut y1 = vec![0.0; n_steps + 1];
    let mut y2 = vec![0.0; n_steps + 1];
    let mut u = [0.0f64; 3];
    // March backward: u(t - h) = u(t) - h * f averaged over the RK4 stages.
    for n in (0..n_steps).rev() {
        let axpy = |x: [f64; 3], k: [f64; 3], c: f64| [x[0] - c * k[0], x[1] - c * k[1], x[2] - c * k[2]];
        let k1 = rhs(u);
        let k2 = rhs(axpy(u, k1, 0.5 * h));
        let k3 = rhs(axpy(u, k2, 0.5 * h));
        let k4 = rhs(axpy(u, k3, h));
        for i in 0..3 {
            u[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(CoreError::StepSize {
                reason: format!("RK4 produced a non-finite value at step {n}"),
                min_steps: 2 * n_steps,
            });
        }
        a[n] = u[0];
        y2[n] = u[1];
        y1[n] = u[2];
    }
    let (r, kappa, ..) = closed_form_constants(model)?;
    Ok(ConstantSolution {
        times,
        a,
        y1,
        y2,
        r,
        kappa,
        mu,
        sigma,
    })
}
