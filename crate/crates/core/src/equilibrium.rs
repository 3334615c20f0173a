//! Equilibrium objects built from a solved BSDE: prices, market
//! coefficients, wealth, consumption, holdings and the state price deflator,
//! plus the Pareto-efficient benchmark.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{BsdeState, Preferences};
use crate::error::{CoreError, Result};
use crate::field::{locate, SolutionField};
use crate::market_model::{uniform_times, DividendPaths, MarketModel};
use crate::ode::{closed_form_constants, ConstantSolution};
use crate::stats::{trapezoid, Estimate};

/// Largest fraction of dividend paths allowed to leave the solved domain.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// Read access to a solved BSDE on a uniform time grid.
pub trait FieldSource: Sync {
    fn horizon(&self) -> f64;
    fn n_steps(&self) -> usize;
    /// Spatial domain where samples are available.
    fn domain(&self) -> (f64, f64);
    /// State on time node `n` at level `d`, with the `d`-slopes of `(z_a, z1, z2)`.
    fn at_node(&self, n: usize, d: f64) -> Result<(BsdeState, [f64; 3])>;
    /// State at an arbitrary `(t, d)`.
    fn at(&self, t: f64, d: f64) -> Result<BsdeState>;

    fn times(&self) -> Vec<f64> {
        uniform_times(self.horizon(), self.n_steps())
    }

    fn dt(&self) -> f64 {
        self.horizon() / self.n_steps() as f64
    }
}

impl FieldSource for ConstantSolution {
    fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn n_steps(&self) -> usize {
        ConstantSolution::n_steps(self)
    }

    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn at_node(&self, n: usize, _d: f64) -> Result<(BsdeState, [f64; 3])> {
        Ok((self.state(n), [0.0; 3]))
    }

    fn at(&self, t: f64, _d: f64) -> Result<BsdeState> {
        let (n, w) = locate(t.clamp(0.0, FieldSource::horizon(self)), FieldSource::dt(self), ConstantSolution::n_steps(self));
        if w == 0.0 {
            return Ok(self.state(n));
        }
        let lerp = |v: &[f64]| (1.0 - w) * v[n] + w * v[n + 1];
        Ok(BsdeState {
            a: lerp(&self.a),
            y1: lerp(&self.y1),
            y2: lerp(&self.y2),
            ..BsdeState::default()
        })
    }
}

impl FieldSource for SolutionField {
    fn horizon(&self) -> f64 {
        self.grid.horizon
    }

    fn n_steps(&self) -> usize {
        self.grid.n_time
    }

    fn domain(&self) -> (f64, f64) {
        (self.grid.d_min, self.grid.d_max)
    }

    fn at_node(&self, n: usize, d: f64) -> Result<(BsdeState, [f64; 3])> {
        self.sample_row(n, d)
    }

    fn at(&self, t: f64, d: f64) -> Result<BsdeState> {
        self.sample(t, d)
    }
}

/// Either backend, chosen by whether the dividend coefficients are constant.
#[derive(Debug, Clone)]
pub enum Backend {
    Constant(ConstantSolution),
    Field(SolutionField),
}

impl Backend {
    pub fn as_source(&self) -> &dyn FieldSource {
        match self {
            Backend::Constant(c) => c,
            Backend::Field(f) => f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Constant(_) => "ode",
            Backend::Field(_) => "field",
        }
    }

    /// Smallest `a` over every stored node.
    pub fn a_min(&self) -> f64 {
        match self {
            Backend::Constant(c) => c.a.iter().copied().fold(f64::INFINITY, f64::min),
            Backend::Field(f) => f.a_min(),
        }
    }

    pub fn y2_abs_max(&self) -> f64 {
        match self {
            Backend::Constant(c) => c.y2.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Backend::Field(f) => f.y2_abs_max(),
        }
    }
}

/// Annuity and stock price at a field sample.
pub fn prices_at(alpha_sigma: f64, s: &BsdeState, d: f64) -> (f64, f64) {
    let a = s.a.exp();
    (a, a * (d - s.a / alpha_sigma - s.y1 - s.y2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub kappa: f64,
    pub sigma_a: f64,
    pub mu_a: f64,
    pub sigma_s: f64,
    pub mu_s: f64,
    pub r: f64,
}

pub fn coefficients_at(model: &MarketModel, s: &BsdeState, t: f64, d: f64) -> Coefficients {
    let sigma = model.sigma_d(t, d);
    let mu = model.mu_d(t, d);
    let (a1, a2, a_s) = (model.agent1.alpha, model.agent2.alpha, model.alpha_sigma);
    let big_a = s.a.exp();
    let kappa = a1 * sigma * (1.0 - s.z_a / a2 - s.z2);
    let sigma_a = sigma * s.z_a;
    let mu_a = a_s * mu + model.rho_sigma + 0.5 * sigma_a * sigma_a
        - 0.5 * a_s * (a2 * sigma * sigma * s.z2 * s.z2 + (kappa - sigma_a) * (kappa - sigma_a) / a1);
    let sigma_s = big_a * sigma * (1.0 - s.z_a / a_s - s.z1 - s.z2);
    let mu_s = sigma_s * (sigma_a + a1 * sigma * s.z1 + a1 * sigma_s / big_a);
    Coefficients {
        kappa,
        sigma_a,
        mu_a,
        sigma_s,
        mu_s,
        r: mu_a - kappa * sigma_a,
    }
}

/// Short rate read off the drift of the deflator `alpha1 exp(-rho1 t - alpha1 c1)`,
/// using the BSDE drivers for the drifts of `a` and `Y1` and the wealth
/// integrand for the drift of `X1 / A`. Independent of `mu_A - kappa sigma_A`.
pub fn short_rate_from_deflator(model: &MarketModel, s: &BsdeState, t: f64, d: f64) -> f64 {
    let p = Preferences::from(model);
    let sigma = model.sigma_d(t, d);
    let mu = model.mu_d(t, d);
    let c = coefficients_at(model, s, t, d);
    let big_a = s.a.exp();
    let a1 = p.alpha1;
    let drift_a = p.drift_a(mu, sigma, s.a, s.z_a, s.z2);
    let drift_y1 = p.drift_y1(sigma, s);
    let drift_q1 = (-s.a / a1 - s.y1 + c.mu_s - c.sigma_s * c.sigma_a) / big_a;
    let vol_c1 = sigma * s.z_a / a1 + c.sigma_s / big_a + sigma * s.z1;
    p.rho1 + drift_a + a1 * (drift_q1 + drift_y1) - 0.5 * a1 * a1 * vol_c1 * vol_c1
}

/// Time series of every equilibrium quantity along one dividend path.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EquilibriumPath {
    pub index: usize,
    pub t: Vec<f64>,
    pub d: Vec<f64>,
    /// Brownian increments driving the path (`db[n]` moves node `n` to `n + 1`).
    pub db: Vec<f64>,
    pub log_a: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    pub kappa: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub mu_a: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub r: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub xi: Vec<f64>,
}

impl EquilibriumPath {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Agent 1 always holds the whole stock supply.
    pub fn psi1(&self, _n: usize) -> f64 {
        1.0
    }

    pub fn dt(&self) -> f64 {
        self.t[1] - self.t[0]
    }

    /// Column names and accessors in export order.
    pub fn columns(&self) -> [(&'static str, &[f64]); 17] {
        [
            ("t", &self.t),
            ("D", &self.d),
            ("A", &self.a),
            ("S", &self.s),
            ("kappa", &self.kappa),
            ("sigma_A", &self.sigma_a),
            ("mu_A", &self.mu_a),
            ("sigma_S", &self.sigma_s),
            ("mu_S", &self.mu_s),
            ("r", &self.r),
            ("X1", &self.x1),
            ("X2", &self.x2),
            ("c1", &self.c1),
            ("c2", &self.c2),
            ("theta1", &self.theta1),
            ("theta2", &self.theta2),
            ("xi", &self.xi),
        ]
    }
}

/// Builds one path. The wealth integrals are accumulated in units of the
/// annuity; the stochastic integral carries the second-order correction
/// `0.5 sigma^2 d(S/A)_dd (dB^2 - dt)`, which matches the Euler dividend path
/// to first order in `dt`.
pub fn build_path(model: &MarketModel, source: &dyn FieldSource, d: &[f64], db: &[f64], index: usize) -> Result<EquilibriumPath> {
    let n_steps = source.n_steps();
    if d.len() != n_steps + 1 || db.len() != n_steps {
        return Err(CoreError::GridMismatch(format!(
            "path has {} levels and {} increments, field has {n_steps} steps",
            d.len(),
            db.len()
        )));
    }
    let times = source.times();
    let dt = source.dt();
    let (a1, a2, a_s) = (model.agent1.alpha, model.agent2.alpha, model.alpha_sigma);
    let (th1, th2) = (model.agent1.theta0, model.agent2.theta0);
    let mut p = EquilibriumPath {
        index,
        t: times,
        d: d.to_vec(),
        db: db.to_vec(),
        ..EquilibriumPath::default()
    };
    let cols: [&mut Vec<f64>; 18] = [
        &mut p.log_a,
        &mut p.y1,
        &mut p.y2,
        &mut p.a,
        &mut p.s,
        &mut p.kappa,
        &mut p.sigma_a,
        &mut p.mu_a,
        &mut p.sigma_s,
        &mut p.mu_s,
        &mut p.r,
        &mut p.x1,
        &mut p.x2,
        &mut p.c1,
        &mut p.c2,
        &mut p.theta1,
        &mut p.theta2,
        &mut p.xi,
    ];
    for c in cols {
        c.reserve_exact(n_steps + 1);
    }

    let mut int1 = 0.0;
    let mut int2 = 0.0;
    let mut sr0 = 0.0;
    for n in 0..=n_steps {
        let (t, dn) = (p.t[n], d[n]);
        let (s, dz) = source.at_node(n, dn)?;
        let (big_a, big_s) = prices_at(a_s, &s, dn);
        let sr = dn - s.a / a_s - s.y1 - s.y2;
        if n == 0 {
            sr0 = sr;
        }
        let c = coefficients_at(model, &s, t, dn);
        let q1 = th1 + sr0 + int1;
        let q2 = th2 - int2;
        let c1 = s.a / a1 + q1 + s.y1;
        p.log_a.push(s.a);
        p.y1.push(s.y1);
        p.y2.push(s.y2);
        p.a.push(big_a);
        p.s.push(big_s);
        p.kappa.push(c.kappa);
        p.sigma_a.push(c.sigma_a);
        p.mu_a.push(c.mu_a);
        p.sigma_s.push(c.sigma_s);
        p.mu_s.push(c.mu_s);
        p.r.push(c.r);
        p.x1.push(big_a * q1);
        p.x2.push(big_a * q2);
        p.c1.push(c1);
        p.c2.push(s.a / a2 + q2 + s.y2);
        p.theta1.push(th1 + (sr0 - sr) + int1);
        p.theta2.push(q2);
        p.xi.push(a1 * (-model.agent1.rho * t - a1 * c1).exp());
        if n < n_steps {
            let w = db[n];
            let sigma = model.sigma_d(t, dn);
            let curvature = -(dz[0] / a_s + dz[1] + dz[2]);
            int1 += dt * (-s.a / a1 - s.y1 + c.mu_s - c.sigma_s * c.sigma_a) / big_a
                + (c.sigma_s / big_a) * w
                + 0.5 * sigma * sigma * curvature * (w * w - dt);
            int2 += dt * (s.a / a2 + s.y2) / big_a;
        }
    }
    Ok(p)
}

/// Lazily evaluated set of equilibrium paths over stored dividend paths.
pub struct Ensemble<'a> {
    pub model: &'a MarketModel,
    pub source: &'a dyn FieldSource,
    pub paths: &'a DividendPaths,
    /// Indices of the dividend paths that stay inside the solved domain.
    pub included: Vec<usize>,
    pub excluded: usize,
}

impl<'a> Ensemble<'a> {
    pub fn new(model: &'a MarketModel, source: &'a dyn FieldSource, paths: &'a DividendPaths) -> Result<Self> {
        if paths.n_steps() != source.n_steps() || paths.times != source.times() {
            return Err(CoreError::GridMismatch(format!(
                "dividend paths use {} steps, the solution uses {}",
                paths.n_steps(),
                source.n_steps()
            )));
        }
        let (lo, hi) = source.domain();
        let included: Vec<usize> = (0..paths.n_paths)
            .filter(|&i| paths.path(i).iter().all(|&d| d >= lo && d <= hi))
            .collect();
        let excluded = paths.n_paths - included.len();
        if excluded as f64 > MAX_EXCLUDED_FRACTION * paths.n_paths as f64 {
            return Err(CoreError::GridCoverage {
                excluded,
                total: paths.n_paths,
            });
        }
        Ok(Self {
            model,
            source,
            paths,
            included,
            excluded,
        })
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.source.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        self.source.times()
    }

    /// The `k`-th included path.
    pub fn path(&self, k: usize) -> Result<EquilibriumPath> {
        let i = self.included[k];
        build_path(self.model, self.source, self.paths.path(i), self.paths.path_increments(i), i)
    }

    /// Applies `f` to every included path in parallel; results keep path order.
    pub fn map<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&EquilibriumPath) -> T + Sync,
    {
        (0..self.len())
            .into_par_iter()
            .map(|k| self.path(k).map(|p| f(&p)))
            .collect()
    }
}

/// Equilibrium paths together with the exclusion count.
#[derive(Debug, Clone)]
pub struct EquilibriumSet {
    pub paths: Vec<EquilibriumPath>,
    pub excluded: usize,
}

/// Materialises every path. Use [`Ensemble`] for large path counts.
pub fn simulate_equilibrium(source: &dyn FieldSource, model: &MarketModel, paths: &DividendPaths) -> Result<EquilibriumSet> {
    let ens = Ensemble::new(model, source, paths)?;
    Ok(EquilibriumSet {
        paths: ens.map(|p| p.clone())?,
        excluded: ens.excluded,
    })
}

/// Pareto-efficient short rate.
pub fn pareto_rate(model: &MarketModel, t: f64, d: f64) -> f64 {
    let s = model.sigma_d(t, d);
    model.rho_sigma + model.alpha_sigma * model.mu_d(t, d) - 0.5 * model.alpha_sigma * model.alpha_sigma * s * s
}

/// Pareto-efficient market price of risk.
pub fn pareto_kappa(model: &MarketModel, t: f64, d: f64) -> f64 {
    model.alpha_sigma * model.sigma_d(t, d)
}

/// Marginal utility of the representative agent at aggregate consumption `1 + d`.
pub fn pareto_deflator(model: &MarketModel, t: f64, d: f64) -> f64 {
    model.alpha_sigma * (-model.rho_sigma * t - model.alpha_sigma * (1.0 + d)).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct ParetoBenchmark {
    /// `(r_PE, kappa_PE)` when the dividend coefficients are constant.
    pub constants: Option<(f64, f64)>,
    pub xi0: f64,
    pub a0: Estimate,
    pub s0: Estimate,
    /// Representative-agent weight; it does not enter the displayed utility.
    pub gamma: f64,
}

/// Monte Carlo prices of the annuity and stock in the Pareto-efficient economy.
pub fn pareto_benchmark(model: &MarketModel, paths: &DividendPaths) -> ParetoBenchmark {
    let dt = paths.dt();
    let xi0 = pareto_deflator(model, 0.0, model.d0);
    let (a, s): (Vec<f64>, Vec<f64>) = (0..paths.n_paths)
        .into_par_iter()
        .map(|i| {
            let d = paths.path(i);
            let xi: Vec<f64> = d
                .iter()
                .zip(&paths.times)
                .map(|(&d, &t)| pareto_deflator(model, t, d) / xi0)
                .collect();
            let xd: Vec<f64> = xi.iter().zip(d).map(|(x, d)| x * d).collect();
            let last = d.len() - 1;
            (trapezoid(&xi, dt) + xi[last], trapezoid(&xd, dt) + xd[last])
        })
        .unzip();
    ParetoBenchmark {
        constants: closed_form_constants(model).ok().map(|(_, _, r, k)| (r, k)),
        xi0,
        a0: Estimate::from_samples(&a),
        s0: Estimate::from_samples(&s),
        gamma: 1.0,
    }
}
