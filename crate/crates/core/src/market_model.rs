//! Model primitives: agents, dividend diffusion, boundedness checks and
//! Euler-Maruyama dividend paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{domain, CounterRng};

/// Preferences and initial annuity endowment of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Absolute risk aversion.
    pub alpha: f64,
    /// Time-preference rate.
    pub rho: f64,
    /// Annuity shares held before trading starts.
    pub theta0: f64,
}

impl AgentParams {
    pub fn new(alpha: f64, rho: f64, theta0: f64) -> Result<Self> {
        let params = Self { alpha, rho, theta0 };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "alpha",
                reason: format!("risk aversion must be finite and > 0, got {}", self.alpha),
            });
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "rho",
                reason: format!("time preference must be finite and >= 0, got {}", self.rho),
            });
        }
        if !self.theta0.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "theta0",
                reason: "initial holding must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Aggregate risk aversion (harmonic) and aggregate time preference.
pub fn aggregate_preferences(alpha1: f64, rho1: f64, alpha2: f64, rho2: f64) -> Result<(f64, f64)> {
    AgentParams::new(alpha1, rho1, 0.0)?;
    AgentParams::new(alpha2, rho2, 0.0)?;
    let alpha_sigma = 1.0 / (1.0 / alpha1 + 1.0 / alpha2);
    let rho_sigma = alpha_sigma * (rho1 / alpha1 + rho2 / alpha2);
    Ok((alpha_sigma, rho_sigma))
}

/// Markovian dividend coefficient families. Time-homogeneous; the `t`
/// argument of the coefficient functions is kept for the general signature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DividendPreset {
    Constant {
        mu: f64,
        sigma: f64,
    },
    /// `mu = clamp(mu0 + mu1 d, -mu_cap, mu_cap)`,
    /// `sigma = clamp(sigma0 + sigma1 d, sigma_floor, sigma_cap)`.
    AffineClamped {
        mu0: f64,
        mu1: f64,
        mu_cap: f64,
        sigma0: f64,
        sigma1: f64,
        sigma_floor: f64,
        sigma_cap: f64,
    },
    /// `mu = mu0 + mu1 tanh(d)`, `sigma = sigma0 + sigma1 tanh(d)`.
    TanhBounded {
        mu0: f64,
        mu1: f64,
        sigma0: f64,
        sigma1: f64,
    },
}

impl DividendPreset {
    pub fn mu(&self, _t: f64, d: f64) -> f64 {
        match *self {
            Self::Constant { mu, .. } => mu,
            Self::AffineClamped { mu0, mu1, mu_cap, .. } => (mu0 + mu1 * d).clamp(-mu_cap, mu_cap),
            Self::TanhBounded { mu0, mu1, .. } => mu0 + mu1 * d.tanh(),
        }
    }

    pub fn sigma(&self, _t: f64, d: f64) -> f64 {
        match *self {
            Self::Constant { sigma, .. } => sigma,
            Self::AffineClamped {
                sigma0,
                sigma1,
                sigma_floor,
                sigma_cap,
                ..
            } => (sigma0 + sigma1 * d).clamp(sigma_floor, sigma_cap),
            Self::TanhBounded { sigma0, sigma1, .. } => sigma0 + sigma1 * d.tanh(),
        }
    }

    /// Spatial derivative of `sigma` (one-sided value at clamp kinks).
    pub fn sigma_slope(&self, _t: f64, d: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::AffineClamped {
                sigma0,
                sigma1,
                sigma_floor,
                sigma_cap,
                ..
            } => {
                let raw = sigma0 + sigma1 * d;
                if raw > sigma_floor && raw < sigma_cap {
                    sigma1
                } else {
                    0.0
                }
            }
            Self::TanhBounded { sigma1, .. } => {
                let th = d.tanh();
                sigma1 * (1.0 - th * th)
            }
        }
    }

    /// `sup |mu|` over all `(t, d)`.
    pub fn mu_sup(&self) -> f64 {
        match *self {
            Self::Constant { mu, .. } => mu.abs(),
            Self::AffineClamped { mu0, mu1, mu_cap, .. } => {
                if mu1 == 0.0 {
                    mu0.abs().min(mu_cap)
                } else {
                    mu_cap
                }
            }
            Self::TanhBounded { mu0, mu1, .. } => mu0.abs() + mu1.abs(),
        }
    }

    /// `(mu, sigma)` when the coefficients do not depend on `(t, d)`.
    pub fn constant_coefficients(&self) -> Option<(f64, f64)> {
        match *self {
            Self::Constant { mu, sigma } => Some((mu, sigma)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let values: &[(&'static str, f64)] = match self {
            Self::Constant { mu, sigma } => &[("mu", *mu), ("sigma", *sigma)],
            Self::AffineClamped {
                mu0,
                mu1,
                mu_cap,
                sigma0,
                sigma1,
                sigma_floor,
                sigma_cap,
            } => {
                if !(sigma_floor <= sigma_cap) || *mu_cap < 0.0 {
                    return Err(CoreError::InvalidParameter {
                        name: "dividend.params",
                        reason: "need sigma_floor <= sigma_cap and mu_cap >= 0".into(),
                    });
                }
                &[
                    ("mu0", *mu0),
                    ("mu1", *mu1),
                    ("mu_cap", *mu_cap),
                    ("sigma0", *sigma0),
                    ("sigma1", *sigma1),
                    ("sigma_floor", *sigma_floor),
                    ("sigma_cap", *sigma_cap),
                ]
            }
            Self::TanhBounded {
                mu0,
                mu1,
                sigma0,
                sigma1,
            } => &[("mu0", *mu0), ("mu1", *mu1), ("sigma0", *sigma0), ("sigma1", *sigma1)],
        };
        for (name, value) in values {
            if !value.is_finite() {
                return Err(CoreError::InvalidParameter {
                    name,
                    reason: format!("must be finite, got {value}"),
                });
            }
        }
        Ok(())
    }
}

/// Two-agent economy: agent 1 trades stock and annuity, agent 2 only the annuity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketModel {
    pub agent1: AgentParams,
    pub agent2: AgentParams,
    pub horizon: f64,
    pub d0: f64,
    pub dividend: DividendPreset,
    /// Bound `M` with `|mu| <= M` and `1/M <= sigma <= M`.
    pub bound_m: f64,
    pub alpha_sigma: f64,
    pub rho_sigma: f64,
}

/// Tolerance on `theta1 + theta2 = 1`.
const SUPPLY_TOL: f64 = 1e-12;

impl MarketModel {
    pub fn new(
        agent1: AgentParams,
        agent2: AgentParams,
        horizon: f64,
        d0: f64,
        dividend: DividendPreset,
        bound_m: f64,
    ) -> Result<Self> {
        agent1.validate()?;
        agent2.validate()?;
        dividend.validate()?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "horizon",
                reason: format!("must be finite and > 0, got {horizon}"),
            });
        }
        if !d0.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "D0",
                reason: "must be finite".into(),
            });
        }
        if !(bound_m.is_finite() && bound_m > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "bound_M",
                reason: format!("must be finite and > 0, got {bound_m}"),
            });
        }
        if (agent1.theta0 + agent2.theta0 - 1.0).abs() > SUPPLY_TOL {
            return Err(CoreError::InvalidParameter {
                name: "theta0",
                reason: format!(
                    "annuity endowments must sum to one, got {} + {}",
                    agent1.theta0, agent2.theta0
                ),
            });
        }
        let (alpha_sigma, rho_sigma) =
            aggregate_preferences(agent1.alpha, agent1.rho, agent2.alpha, agent2.rho)?;
        Ok(Self {
            agent1,
            agent2,
            horizon,
            d0,
            dividend,
            bound_m,
            alpha_sigma,
            rho_sigma,
        })
    }

    #[inline]
    pub fn mu_d(&self, t: f64, d: f64) -> f64 {
        self.dividend.mu(t, d)
    }

    #[inline]
    pub fn sigma_d(&self, t: f64, d: f64) -> f64 {
        self.dividend.sigma(t, d)
    }

    pub fn is_constant(&self) -> bool {
        self.dividend.constant_coefficients().is_some()
    }
}

/// Uniform `(t, d)` probe mesh with `n_t x n_d` points on `[0, T] x [d_min, d_max]`.
pub fn probe_mesh(model: &MarketModel, d_min: f64, d_max: f64, n_t: usize, n_d: usize) -> Vec<(f64, f64)> {
    let n_t = n_t.max(2);
    let n_d = n_d.max(2);
    let mut mesh = Vec::with_capacity(n_t * n_d);
    for i in 0..n_t {
        let t = model.horizon * i as f64 / (n_t - 1) as f64;
        for j in 0..n_d {
            mesh.push((t, d_min + (d_max - d_min) * j as f64 / (n_d - 1) as f64));
        }
    }
    mesh
}

/// Checks the boundedness assumption at every probe point.
pub fn validate_model(model: &MarketModel, probe: &[(f64, f64)]) -> Result<()> {
    let m = model.bound_m;
    for &(t, d) in probe {
        let mu = model.mu_d(t, d);
        if !(mu.abs() <= m) {
            return Err(CoreError::AssumptionViolation {
                t,
                d,
                quantity: "mu_D",
                value: mu,
                lower: -m,
                upper: m,
            });
        }
        let sigma = model.sigma_d(t, d);
        if !(sigma >= 1.0 / m && sigma <= m) {
            return Err(CoreError::AssumptionViolation {
                t,
                d,
                quantity: "sigma_D",
                value: sigma,
                lower: 1.0 / m,
                upper: m,
            });
        }
    }
    Ok(())
}

/// Simulated dividend paths on a uniform grid, with the Brownian increments used.
#[derive(Debug, Clone)]
pub struct DividendPaths {
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// Row-major, `n_paths x (n_steps + 1)`.
    pub levels: Vec<f64>,
    /// Row-major, `n_paths x n_steps`.
    pub increments: Vec<f64>,
    pub seed: u64,
}

impl DividendPaths {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let w = self.n_steps() + 1;
        &self.levels[i * w..(i + 1) * w]
    }

    pub fn path_increments(&self, i: usize) -> &[f64] {
        let w = self.n_steps();
        &self.increments[i * w..(i + 1) * w]
    }

    /// Keeps the first `n` paths.
    pub fn truncated(&self, n: usize) -> Self {
        self.slice(0, n)
    }

    /// Paths `start .. start + n` (clipped to the available range).
    pub fn slice(&self, start: usize, n: usize) -> Self {
        let start = start.min(self.n_paths);
        let end = (start + n).min(self.n_paths);
        let (w, k) = (self.n_steps() + 1, self.n_steps());
        Self {
            times: self.times.clone(),
            n_paths: end - start,
            levels: self.levels[start * w..end * w].to_vec(),
            increments: self.increments[start * k..end * k].to_vec(),
            seed: self.seed,
        }
    }
}

/// Uniform time grid `t_n = T n / n_steps`; the last node is exactly `T`.
pub fn uniform_times(horizon: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|n| horizon * n as f64 / n_steps as f64)
        .collect()
}

/// Euler-Maruyama paths of `dD = mu dt + sigma dB`; path `i` uses the
/// counter-based substream `(seed, i)`.
pub fn simulate_dividend_paths(
    model: &MarketModel,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DividendPaths> {
    if n_steps == 0 || n_paths == 0 {
        return Err(CoreError::InvalidParameter {
            name: "n_steps/n_paths",
            reason: format!("both must be >= 1, got {n_steps} and {n_paths}"),
        });
    }
    let times = uniform_times(model.horizon, n_steps);
    let rng = CounterRng::new(seed, domain::DIVIDEND);
    let w = n_steps + 1;
    let mut levels = vec![0.0; n_paths * w];
    let mut increments = vec![0.0; n_paths * n_steps];
    levels
        .par_chunks_mut(w)
        .zip(increments.par_chunks_mut(n_steps))
        .enumerate()
        .for_each(|(i, (row, incs))| {
            let mut stream = rng.path(i as u64);
            row[0] = model.d0;
            for n in 0..n_steps {
                let dt = times[n + 1] - times[n];
                let db = dt.sqrt() * stream.next_normal();
                incs[n] = db;
                let (t, d) = (times[n], row[n]);
                row[n + 1] = d + model.mu_d(t, d) * dt + model.sigma_d(t, d) * db;
            }
        });
    Ok(DividendPaths {
        times,
        n_paths,
        levels,
        increments,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(mu: f64, sigma: f64, m: f64) -> MarketModel {
        let a = AgentParams::new(2.0, 0.0, 0.5).unwrap();
        MarketModel::new(a, a, 1.0, 1.0, DividendPreset::Constant { mu, sigma }, m).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_preferences(1.0, 0.0, 1.0, 0.0).unwrap(), (0.5, 0.0));
        assert_eq!(aggregate_preferences(2.0, 0.0, 2.0, 0.0).unwrap(), (1.0, 0.0));
        let (a, r) = aggregate_preferences(1.0, 0.1, 3.0, 0.3).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
        assert!((r - 0.15).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_nonpositive_alpha() {
        assert!(matches!(
            aggregate_preferences(0.0, 0.0, 1.0, 0.0),
            Err(CoreError::InvalidParameter { name: "alpha", .. })
        ));
        assert!(aggregate_preferences(1.0, 0.0, -2.0, 0.0).is_err());
        assert!(aggregate_preferences(1.0, -0.1, 2.0, 0.0).is_err());
    }

    #[test]
    fn endowments_must_sum_to_one() {
        let a = AgentParams::new(1.0, 0.0, 0.5).unwrap();
        let b = AgentParams::new(1.0, 0.0, 0.6).unwrap();
        let err = MarketModel::new(a, b, 1.0, 0.0, DividendPreset::Constant { mu: 0.0, sigma: 1.0 }, 2.0);
        assert!(matches!(err, Err(CoreError::InvalidParameter { name: "theta0", .. })));
    }

    #[test]
    fn validate_constant_models() {
        let ok = constant(0.0, 1.0, 2.0);
        let mesh = probe_mesh(&ok, -5.0, 5.0, 5, 11);
        assert!(validate_model(&ok, &mesh).is_ok());

        let bad = constant(3.0, 1.0, 2.0);
        for &p in &mesh {
            assert!(matches!(
                validate_model(&bad, &[p]),
                Err(CoreError::AssumptionViolation { quantity: "mu_D", .. })
            ));
        }
    }

    #[test]
    fn validate_reports_first_violation() {
        let bad = constant(0.0, 0.4, 2.0);
        match validate_model(&bad, &[(0.0, 1.0), (0.5, 2.0)]) {
            Err(CoreError::AssumptionViolation { t, d, quantity, value, .. }) => {
                assert_eq!((t, d, quantity, value), (0.0, 1.0, "sigma_D", 0.4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_tanh_volatility() {
        let a = AgentParams::new(2.0, 0.0, 0.5).unwrap();
        let preset = DividendPreset::TanhBounded {
            mu0: 0.0,
            mu1: 0.0,
            sigma0: 1.0,
            sigma1: 0.4,
        };
        let model = MarketModel::new(a, a, 1.0, 0.0, preset, 2.0).unwrap();
        let mesh = probe_mesh(&model, -50.0, 50.0, 3, 2001);
        assert!(validate_model(&model, &mesh).is_ok());
        let (lo, hi) = mesh.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(t, d)| {
            let s = model.sigma_d(t, d);
            (lo.min(s), hi.max(s))
        });
        assert!(lo > 0.6 - 1e-12 && hi < 1.4 + 1e-12);
    }

    #[test]
    fn sigma_slope_matches_finite_difference() {
        let presets = [
            DividendPreset::TanhBounded {
                mu0: 0.0,
                mu1: 0.1,
                sigma0: 1.0,
                sigma1: 0.4,
            },
            DividendPreset::AffineClamped {
                mu0: 0.0,
                mu1: 0.1,
                mu_cap: 0.5,
                sigma0: 1.0,
                sigma1: 0.2,
                sigma_floor: 0.6,
                sigma_cap: 1.5,
            },
        ];
        for p in presets {
            for d in [-3.1, -0.7, 0.0, 0.3, 1.9] {
                let h = 1e-6;
                let fd = (p.sigma(0.0, d + h) - p.sigma(0.0, d - h)) / (2.0 * h);
                assert!((fd - p.sigma_slope(0.0, d)).abs() < 1e-8, "{p:?} at {d}");
            }
        }
    }

    #[test]
    fn single_step_is_exact_euler() {
        let model = constant(0.3, 1.5, 2.0);
        let paths = simulate_dividend_paths(&model, 1, 1, 99).unwrap();
        let w = paths.path_increments(0)[0];
        assert_eq!(paths.path(0)[1], model.d0 + 0.3 * 1.0 + 1.5 * w);
        assert_eq!(paths.path(0)[0], model.d0);
    }

    #[test]
    fn same_seed_same_paths() {
        let model = constant(0.1, 1.0, 2.0);
        let a = simulate_dividend_paths(&model, 20, 50, 5).unwrap();
        let b = simulate_dividend_paths(&model, 20, 50, 5).unwrap();
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.increments, b.increments);
        let c = simulate_dividend_paths(&model, 20, 50, 6).unwrap();
        assert_ne!(a.levels, c.levels);
    }

    #[test]
    fn terminal_moments_constant_model() {
        let (mu, sigma, t) = (0.2, 1.0, 1.0);
        let model = constant(mu, sigma, 2.0);
        let n = 10_000;
        let paths = simulate_dividend_paths(&model, 50, n, 11).unwrap();
        let terminal: Vec<f64> = (0..n).map(|i| paths.path(i)[50] - model.d0).collect();
        let mean = terminal.iter().sum::<f64>() / n as f64;
        assert!((mean - mu * t).abs() <= 3.0 * sigma * t.sqrt() / (n as f64).sqrt());
        let var = terminal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // sd of the sample variance of a normal is sigma^2 sqrt(2/(n-1))
        assert!((var - sigma * sigma * t).abs() <= 4.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn rejects_empty_sizes() {
        let model = constant(0.0, 1.0, 2.0);
        assert!(simulate_dividend_paths(&model, 0, 1, 0).is_err());
        assert!(simulate_dividend_paths(&model, 1, 0, 0).is_err());
    }
}
