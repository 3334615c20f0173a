//! Executable equilibrium checks: market clearing, martingale and no-bubble
//! tests, BSDE and price-dynamics residuals, optimality certificates for both
//! agents, and the Pareto and a-priori bound comparisons.
//!
//! Statistical checks compare a Monte Carlo mean against `3 SE` plus an
//! explicit discretisation allowance `BIAS_FACTOR * dt * scale`; the scale of
//! each check is stated in its details. Several quantities are deterministic
//! in the constant-coefficient case, where the standard error is zero and only
//! the allowance remains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{driver_a, Preferences, TruncationConfig};
use crate::equilibrium::{coefficients_at, short_rate_from_deflator, Backend, Ensemble, EquilibriumPath, FieldSource};
use crate::error::{CoreError, Result};
use crate::field::GridSpec;
use crate::market_model::{simulate_dividend_paths, DividendPaths, MarketModel};
use crate::ode::closed_form_constants;
use crate::pipeline::{solve, Solved};
use crate::rng::{domain, CounterRng};
use crate::stats::{cumulative_trapezoid, trapezoid, Estimate};

/// Fewest paths accepted by the statistical checks.
pub const MIN_PATHS: usize = 1000;
pub const SE_MULTIPLIER: f64 = 3.0;
/// Discretisation allowance per unit of `dt` and of the check's scale.
pub const BIAS_FACTOR: f64 = 2.0;
/// Clearing residuals must stay below `CLEARING_FACTOR * dt`.
pub const CLEARING_FACTOR: f64 = 10.0;
/// Largest accepted ratio of clearing residuals after halving `dt`.
pub const HALVING_RATIO: f64 = 0.55;
/// Discrete BSDE residual bound per unit of `dt`.
pub const RESIDUAL_FACTOR: f64 = 20.0;
pub const Z_RELATIVE_TOL: f64 = 1e-2;
/// Derivatives below this size are compared in absolute terms.
pub const Z_FLOOR: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-12;
/// Price increments: `|dX - Euler prediction| <= INCREMENT_FACTOR * scale * (dt + dB^2)`.
pub const INCREMENT_FACTOR: f64 = 2.0;
pub const BOUND_TOL: f64 = 1e-6;
/// Allowance per unit of `dt` between the integral and self-financing forms of `X1`.
pub const SELF_FINANCING_FACTOR: f64 = 5.0;
/// Perturbed holdings above this size are not admissible.
pub const MAX_HOLDING_SHIFT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    /// `statistic <= threshold`; a NaN statistic fails.
    pub passed: bool,
    pub n_samples: usize,
    pub details: String,
    pub mandatory: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: f64, n_samples: usize, details: String) -> Self {
        Self {
            name: name.into(),
            statistic,
            threshold,
            passed: statistic <= threshold,
            n_samples,
            details,
            mandatory: true,
        }
    }

    fn informational(mut self) -> Self {
        self.mandatory = false;
        self
    }
}

/// One admissible deviation from an agent's candidate strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Consume `delta` more on `[0, until * T)`, financed by annuity holdings.
    ConsumptionShift { agent: u8, delta: f64, until: f64 },
    /// Hold `epsilon sin(pi t / T)` more annuities and consume the difference.
    HoldingBump { agent: u8, epsilon: f64 },
}

impl Perturbation {
    pub fn agent(&self) -> u8 {
        match *self {
            Self::ConsumptionShift { agent, .. } | Self::HoldingBump { agent, .. } => agent,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::ConsumptionShift { agent, delta, until } => format!("agent{agent}_consumption_{delta:+}_until_{until}T"),
            Self::HoldingBump { agent, epsilon } => format!("agent{agent}_annuity_bump_{epsilon:+}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |reason: String| Err(CoreError::RejectedPerturbation(reason));
        if !matches!(self.agent(), 1 | 2) {
            return reject(format!("agent must be 1 or 2, got {}", self.agent()));
        }
        match *self {
            Self::ConsumptionShift { delta, until, .. } => {
                if !delta.is_finite() || !(until > 0.0 && until <= 1.0) {
                    return reject(format!("consumption shift needs finite delta and until in (0, 1], got {delta}, {until}"));
                }
            }
            Self::HoldingBump { epsilon, .. } => {
                if !(epsilon.is_finite() && epsilon.abs() <= MAX_HOLDING_SHIFT) {
                    return reject(format!("holding bump {epsilon} is unbounded"));
                }
            }
        }
        Ok(())
    }
}

/// Consumption shifts of +-0.1 on the first half of the horizon and annuity
/// bumps of +-0.1, for both agents.
pub fn default_menu() -> Vec<Perturbation> {
    let mut menu = Vec::new();
    for agent in [1u8, 2] {
        for delta in [0.1, -0.1] {
            menu.push(Perturbation::ConsumptionShift { agent, delta, until: 0.5 });
        }
        for epsilon in [0.1, -0.1] {
            menu.push(Perturbation::HoldingBump { agent, epsilon });
        }
    }
    menu
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOptions {
    /// Fractions of the horizon; snapped to the nearest grid node.
    pub checkpoints: Vec<f64>,
    pub seed: u64,
    /// Negative control: replace `kappa` by `factor * kappa` in the deflator.
    pub corrupt_kappa: Option<f64>,
    /// Negative control: flip the sign of the quadratic term in the
    /// Feynman-Kac integrand of `Y1`.
    pub corrupt_driver_sign: bool,
    pub perturbations: Vec<Perturbation>,
    pub identity_samples: usize,
    /// Repeat the clearing check with `dt / 2`.
    pub refine_clearing: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
            seed: 42,
            corrupt_kappa: None,
            corrupt_driver_sign: false,
            perturbations: default_menu(),
            identity_samples: 1000,
            refine_clearing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub backend: String,
    pub n_steps: usize,
    pub dt: f64,
    pub d_min: Option<f64>,
    pub d_max: Option<f64>,
    pub n_space: Option<usize>,
    pub truncation_n: Option<u32>,
    pub n_paths: usize,
    pub excluded_paths: usize,
    pub seed: u64,
    pub corrupt_kappa: Option<f64>,
    pub corrupt_driver_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub model_fingerprint: String,
    pub metadata: RunMetadata,
    pub checks: Vec<CheckResult>,
    pub overall_pass: bool,
}

impl VerificationReport {
    pub fn new(model: &MarketModel, metadata: RunMetadata, checks: Vec<CheckResult>) -> Self {
        let overall_pass = checks.iter().all(|c| c.passed || !c.mandatory);
        Self {
            model_fingerprint: fingerprint(model),
            metadata,
            checks,
            overall_pass,
        }
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.mandatory && !c.passed)
    }
}

/// FNV-1a over the model's debug representation (floats print in shortest
/// round-trip form, so equal models give equal fingerprints).
pub fn fingerprint(model: &MarketModel) -> String {
    let text = format!("{model:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn require_paths(ens: &Ensemble) -> Result<()> {
    if ens.len() < MIN_PATHS {
        return Err(CoreError::TooFewSamples {
            have: ens.len(),
            need: MIN_PATHS,
        });
    }
    Ok(())
}

fn allowance(dt: f64, scale: f64) -> f64 {
    BIAS_FACTOR * dt * scale
}

fn checkpoint_indices(fractions: &[f64], n_steps: usize) -> Vec<usize> {
    fractions
        .iter()
        .map(|f| ((f.clamp(0.0, 1.0) * n_steps as f64).round() as usize).min(n_steps))
        .collect()
}

fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

/// `|mean| / (3 SE + allowance)` with `0 / 0 = 0`.
fn normalised(e: &Estimate, allow: f64) -> f64 {
    let bound = SE_MULTIPLIER * e.se + allow;
    if e.mean == 0.0 {
        0.0
    } else {
        e.mean.abs() / bound
    }
}

/// Flatness test of `P_t - P_0` at several checkpoints: one normalised
/// statistic against threshold 1, with a per-checkpoint breakdown.
fn flatness(name: &str, times: &[f64], idx: &[usize], increments: &[Vec<f64>], levels: &[Vec<f64>], dt: f64) -> CheckResult {
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    let base = mean_abs(&levels[0]);
    for (k, &n) in idx.iter().enumerate() {
        let e = Estimate::from_samples(&increments[k]);
        let scale = base + mean_abs(&levels[k + 1]);
        let allow = allowance(dt, scale);
        worst = worst.max(normalised(&e, allow));
        details.push(format!("t={:.4}: mean={:.3e} se={:.3e} allow={:.3e}", times[n], e.mean, e.se, allow));
    }
    let n = increments.first().map_or(0, |v| v.len());
    CheckResult::new(name, worst, 1.0, n, details.join("; "))
}

// ---------------------------------------------------------------------------
// Clearing

fn clearing_maxima(ens: &Ensemble) -> Result<([f64; 3], f64)> {
    let per_path = ens.map(|p| {
        let mut m = [0.0f64; 4];
        for n in 0..p.len() {
            m[0] = m[0].max((p.c1[n] + p.c2[n] - 1.0 - p.d[n]).abs());
            m[1] = m[1].max((p.theta1[n] + p.theta2[n] - 1.0).abs());
            m[2] = m[2].max((p.x1[n] + p.x2[n] - p.s[n] - p.a[n]).abs());
            m[3] = m[3].max(p.a[n]);
        }
        m
    })?;
    let m = per_path.iter().fold([0.0f64; 4], |acc, v| std::array::from_fn(|i| acc[i].max(v[i])));
    Ok(([m[0], m[1], m[2]], m[3]))
}

/// Maxima over paths and times of the consumption, annuity and wealth
/// clearing residuals. The wealth threshold scales with the largest annuity
/// price because wealth is tracked in annuity units.
pub fn check_clearing(ens: &Ensemble) -> Result<[CheckResult; 3]> {
    if ens.is_empty() {
        return Err(CoreError::TooFewSamples { have: 0, need: 1 });
    }
    let dt = ens.dt();
    let (m, a_max) = clearing_maxima(ens)?;
    let base = CLEARING_FACTOR * dt;
    let wealth = base * a_max.max(1.0);
    let n = ens.len();
    Ok([
        CheckResult::new("clearing_consumption", m[0], base, n, format!("max |c1 + c2 - 1 - D|, threshold {CLEARING_FACTOR} dt")),
        CheckResult::new("clearing_annuity", m[1], base, n, format!("max |theta1 + theta2 - 1|, threshold {CLEARING_FACTOR} dt")),
        CheckResult::new(
            "clearing_wealth",
            m[2],
            wealth,
            n,
            format!("max |X1 + X2 - S - A|, threshold {CLEARING_FACTOR} dt max(1, sup A) with sup A = {a_max:.6}"),
        ),
    ])
}

/// Ratio of the clearing residuals after halving `dt`.
pub fn clearing_refinement(coarse: &[CheckResult; 3], fine: &[CheckResult; 3]) -> CheckResult {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (c, f) in coarse.iter().zip(fine) {
        // residuals at round-off level carry no convergence information
        if c.statistic > 1e-13 {
            let ratio = f.statistic / c.statistic;
            worst = worst.max(ratio);
            parts.push(format!("{}: {:.3e} -> {:.3e} (ratio {ratio:.4})", c.name, c.statistic, f.statistic));
        }
    }
    CheckResult::new("clearing_halving", worst, HALVING_RATIO, coarse[0].n_samples, parts.join("; "))
}

// ---------------------------------------------------------------------------
// Martingales

/// Deflator with `kappa` replaced by `factor * kappa` and the short rate
/// adjusted to `mu_A - factor kappa sigma_A`, integrated in log-Euler form.
pub fn corrupted_deflator(p: &EquilibriumPath, factor: f64) -> Vec<f64> {
    let dt = p.dt();
    let mut xi = Vec::with_capacity(p.len());
    let mut x = p.xi[0];
    xi.push(x);
    for n in 0..p.len() - 1 {
        let k = factor * p.kappa[n];
        let r = p.mu_a[n] - k * p.sigma_a[n];
        x *= (-(r + 0.5 * k * k) * dt - k * p.db[n]).exp();
        xi.push(x);
    }
    xi
}

fn deflator(p: &EquilibriumPath, corrupt: Option<f64>) -> Vec<f64> {
    match corrupt {
        Some(f) => corrupted_deflator(p, f),
        None => p.xi.clone(),
    }
}

struct MartingaleSample {
    /// `[process][checkpoint]` increments and levels (levels[0] is t = 0).
    inc: [Vec<f64>; 4],
    lev: [Vec<f64>; 4],
    repl_s: f64,
    repl_a: f64,
    xi_s_max: f64,
}

const MARTINGALE_NAMES: [&str; 4] = [
    "martingale_annuity",
    "martingale_stock",
    "martingale_wealth2",
    "martingale_wealth1",
];

/// Flatness of the four deflated gains processes at the checkpoints,
/// replication of `S0` and `A0`, and a uniform-integrability surrogate.
pub fn check_martingales(ens: &Ensemble, checkpoints: &[f64], corrupt_kappa: Option<f64>) -> Result<Vec<CheckResult>> {
    require_paths(ens)?;
    let dt = ens.dt();
    let times = ens.times();
    let idx = checkpoint_indices(checkpoints, times.len() - 1);
    let samples = ens.map(|p| {
        let xi = deflator(p, corrupt_kappa);
        let last = p.len() - 1;
        let weights: [Vec<f64>; 4] = [
            xi.clone(),
            xi.iter().zip(&p.d).map(|(x, d)| x * d).collect(),
            xi.iter().zip(&p.c2).map(|(x, c)| x * c).collect(),
            xi.iter().zip(&p.c1).map(|(x, c)| x * c).collect(),
        ];
        let holdings = [&p.a, &p.s, &p.x2, &p.x1];
        let mut inc: [Vec<f64>; 4] = Default::default();
        let mut lev: [Vec<f64>; 4] = Default::default();
        let mut repl = [0.0; 2];
        for k in 0..4 {
            let int = cumulative_trapezoid(&weights[k], dt);
            let proc: Vec<f64> = (0..p.len()).map(|n| xi[n] * holdings[k][n] + int[n]).collect();
            lev[k].push(proc[0]);
            for &n in &idx {
                inc[k].push(proc[n] - proc[0]);
                lev[k].push(proc[n]);
            }
            if k < 2 {
                repl[k] = (int[last] + xi[last] * if k == 0 { 1.0 } else { p.d[last] }) / xi[0];
            }
        }
        let xi_s_max = xi.iter().zip(&p.s).fold(0.0f64, |m, (x, s)| m.max((x * s).abs()));
        MartingaleSample {
            inc,
            lev,
            repl_s: repl[1],
            repl_a: repl[0],
            xi_s_max,
        }
    })?;

    let mut out = Vec::new();
    for k in 0..4 {
        let increments: Vec<Vec<f64>> = (0..idx.len()).map(|c| samples.iter().map(|s| s.inc[k][c]).collect()).collect();
        let levels: Vec<Vec<f64>> = (0..=idx.len()).map(|c| samples.iter().map(|s| s.lev[k][c]).collect()).collect();
        out.push(flatness(MARTINGALE_NAMES[k], &times, &idx, &increments, &levels, dt));
    }

    let p0 = ens.path(0)?;
    let n = samples.len();
    for (name, target, values) in [
        ("replication_stock", p0.s[0], samples.iter().map(|s| s.repl_s).collect::<Vec<_>>()),
        ("replication_annuity", p0.a[0], samples.iter().map(|s| s.repl_a).collect::<Vec<_>>()),
    ] {
        let e = Estimate::from_samples(&values);
        let allow = allowance(dt, target.abs() + mean_abs(&values));
        let stat = (e.mean - target).abs();
        out.push(CheckResult::new(
            name,
            stat,
            SE_MULTIPLIER * e.se + allow,
            n,
            format!("price {target:.6}, replication {:.6} (se {:.2e}), allowance {allow:.2e}", e.mean, e.se),
        ));
    }

    // Deterministic-time flatness cannot certify uniform integrability; the
    // tail of max_t |xi S| is recorded instead.
    let mut tails: Vec<f64> = samples.iter().map(|s| s.xi_s_max).collect();
    tails.sort_by(f64::total_cmp);
    let q = |p: f64| tails[((p * (tails.len() - 1) as f64).round()) as usize];
    let (median, top) = (q(0.5), q(1.0));
    out.push(
        CheckResult::new(
            "ui_surrogate",
            top,
            f64::INFINITY,
            n,
            format!("surrogate only: max over grid of |xi S|, median {median:.4e}, q99 {:.4e}, max {top:.4e}", q(0.99)),
        )
        .informational(),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Residuals

/// Discrete BSDE residual, divided by `dt`, over every time step.
fn bsde_residual_max(model: &MarketModel, backend: &Backend) -> Result<f64> {
    match backend {
        Backend::Field(f) => {
            let rows: Result<Vec<[f64; 3]>> = (0..f.grid.n_time).into_par_iter().map(|n| f.bsde_residual(model, n)).collect();
            Ok(rows?.iter().flatten().fold(0.0f64, |m, v| m.max(*v)))
        }
        Backend::Constant(c) => {
            let p = Preferences::from(model);
            let dt = c.dt();
            let mut worst = 0.0f64;
            for n in 0..c.n_steps() {
                let s = c.state(n);
                driver_a(model, c.times[n], model.d0, &s)?;
                let g = [
                    p.drift_a(c.mu, c.sigma, s.a, 0.0, 0.0),
                    p.drift_y1(c.sigma, &s),
                    p.drift_y2(c.sigma, s.a, s.y2, 0.0),
                ];
                let u = [(&c.a, 0), (&c.y1, 1), (&c.y2, 2)];
                for (v, i) in u {
                    worst = worst.max(((v[n + 1] - v[n]) / dt - g[i]).abs());
                }
            }
            Ok(worst)
        }
    }
}

/// Relative gap between the stored loadings and a five-point derivative of
/// the value fields at interior nodes.
fn z_consistency(backend: &Backend) -> (f64, usize) {
    let Backend::Field(f) = backend else {
        return (0.0, 0);
    };
    let (w, dx) = (f.grid.n_space + 1, f.grid.dx());
    let pairs = [(&f.a, &f.z_a), (&f.y1, &f.z1), (&f.y2, &f.z2)];
    let rows: Vec<(f64, usize)> = (0..=f.grid.n_time)
        .into_par_iter()
        .map(|n| {
            let mut worst = 0.0f64;
            let mut count = 0;
            for (u, z) in pairs {
                let u = &u[n * w..(n + 1) * w];
                let z = &z[n * w..(n + 1) * w];
                for j in 2..w - 2 {
                    let fd = (u[j - 2] - 8.0 * u[j - 1] + 8.0 * u[j + 1] - u[j + 2]) / (12.0 * dx);
                    worst = worst.max((z[j] - fd).abs() / fd.abs().max(Z_FLOOR));
                    count += 1;
                }
            }
            (worst, count)
        })
        .collect();
    rows.iter().fold((0.0, 0), |(m, c), (w, k)| (m.max(*w), c + k))
}

/// Largest relative errors of `mu_S = kappa sigma_S` and of the two routes
/// to the short rate at random samples of the solution.
fn identity_errors(model: &MarketModel, source: &dyn FieldSource, n: usize, seed: u64) -> Result<(f64, f64)> {
    let (lo, hi) = source.domain();
    let wide = 5.0 * model.bound_m * model.horizon.sqrt();
    let (lo, hi) = (lo.max(model.d0 - wide), hi.min(model.d0 + wide));
    let mut stream = CounterRng::new(seed, domain::IDENTITY_SAMPLES).path(0);
    let mut e = (0.0f64, 0.0f64);
    for _ in 0..n {
        let t = model.horizon * stream.next_uniform();
        let d = lo + (hi - lo) * stream.next_uniform();
        let s = source.at(t, d)?;
        let c = coefficients_at(model, &s, t, d);
        e.0 = e.0.max((c.mu_s - c.kappa * c.sigma_s).abs() / (1.0 + c.mu_s.abs()));
        let r_alt = short_rate_from_deflator(model, &s, t, d);
        e.1 = e.1.max((c.r - r_alt).abs() / (1.0 + c.r.abs()));
    }
    Ok(e)
}

/// BSDE residual, loading consistency, algebraic identities, pathwise price
/// increments and the self-financing form of agent 1's wealth.
pub fn check_residuals(model: &MarketModel, backend: &Backend, ens: &Ensemble, identity_samples: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let dt = ens.dt();
    let mut out = Vec::new();

    let res = bsde_residual_max(model, backend)?;
    out.push(CheckResult::new(
        "bsde_residual",
        res,
        RESIDUAL_FACTOR * dt,
        ens.source.n_steps(),
        format!("max over steps and interior nodes of |discrete residual| / dt, threshold {RESIDUAL_FACTOR} dt"),
    ));

    let (z, count) = z_consistency(backend);
    let z_details = if count == 0 {
        "loadings vanish identically for constant coefficients".to_string()
    } else {
        format!("five-point derivative, floor {Z_FLOOR}")
    };
    out.push(CheckResult::new("z_consistency", z, Z_RELATIVE_TOL, count, z_details));

    let (e_mu, e_r) = identity_errors(model, ens.source, identity_samples, seed)?;
    out.push(CheckResult::new("identity_mu_s", e_mu, IDENTITY_TOL, identity_samples, "max |mu_S - kappa sigma_S| / (1 + |mu_S|)".into()));
    out.push(CheckResult::new("identity_short_rate", e_r, IDENTITY_TOL, identity_samples, "max |r - r_deflator| / (1 + |r|)".into()));

    // Euler predictions of the price increments, normalised by dt + dB^2.
    let per_path = ens.map(|p| {
        let mut m = [0.0f64; 4];
        for n in 0..p.len() - 1 {
            let w = p.db[n];
            let norm = dt + w * w;
            let pred_a = (-1.0 + p.a[n] * p.mu_a[n]) * dt + p.a[n] * p.sigma_a[n] * w;
            let pred_s = (-p.d[n] + p.mu_s[n] + p.s[n] * p.mu_a[n]) * dt + (p.sigma_s[n] + p.s[n] * p.sigma_a[n]) * w;
            m[0] = m[0].max((p.a[n + 1] - p.a[n] - pred_a).abs() / norm);
            m[1] = m[1].max((p.s[n + 1] - p.s[n] - pred_s).abs() / norm);
            m[2] = m[2].max(p.a[n]);
            m[3] = m[3].max(p.s[n].abs());
        }
        let x_sf = self_financed_wealth1(p);
        let gap: Vec<f64> = p.x1.iter().zip(&x_sf).map(|(x, y)| x - y).collect();
        let last = gap.len() - 1;
        (m, gap[last], gap.iter().fold(0.0f64, |m, g| m.max(g.abs())), p.x1[last].abs())
    })?;
    let m = per_path.iter().fold([0.0f64; 4], |acc, (v, ..)| std::array::from_fn(|i| acc[i].max(v[i])));
    let n = per_path.len();
    let scale = 1.0 + m[2] + m[3];
    out.push(CheckResult::new(
        "increments_annuity",
        m[0],
        INCREMENT_FACTOR * scale,
        n,
        format!("max |dA - Euler| / (dt + dB^2), threshold {INCREMENT_FACTOR} (1 + sup A + sup |S|)"),
    ));
    out.push(CheckResult::new(
        "increments_stock",
        m[1],
        INCREMENT_FACTOR * scale,
        n,
        format!("max |dS - Euler| / (dt + dB^2), threshold {INCREMENT_FACTOR} (1 + sup A + sup |S|)"),
    ));

    let gaps: Vec<f64> = per_path.iter().map(|v| v.1).collect();
    let e = Estimate::from_samples(&gaps);
    let path_max = per_path.iter().fold(0.0f64, |m, v| m.max(v.2));
    let scale = per_path.iter().map(|v| v.3).sum::<f64>() / n as f64 + 1.0;
    let allow = SELF_FINANCING_FACTOR * dt * scale;
    out.push(CheckResult::new(
        "self_financing",
        e.mean.abs(),
        SE_MULTIPLIER * e.se + allow,
        n,
        format!(
            "terminal X1 gap mean {:.3e} (se {:.2e}), allowance {allow:.2e}; pathwise max {path_max:.3e}",
            e.mean, e.se
        ),
    ));
    Ok(out)
}

/// Agent 1's wealth from the self-financing recursion with one share of
/// stock and `theta1` annuities.
pub fn self_financed_wealth1(p: &EquilibriumPath) -> Vec<f64> {
    let dt = p.dt();
    let mut x = Vec::with_capacity(p.len());
    let mut v = p.x1[0];
    x.push(v);
    for n in 0..p.len() - 1 {
        v += p.psi1(n) * (p.s[n + 1] - p.s[n] + p.d[n] * dt) + p.theta1[n] * (p.a[n + 1] - p.a[n] + dt) - p.c1[n] * dt;
        x.push(v);
    }
    x
}

// ---------------------------------------------------------------------------
// Optimality

/// Exponential utility `-exp(-rho t - alpha c)`.
pub fn utility(alpha: f64, rho: f64, t: f64, c: f64) -> f64 {
    -(-rho * t - alpha * c).exp()
}

/// Fenchel transform `sup_c (U(t, c) - y c)` of the exponential utility.
pub fn conjugate_utility(alpha: f64, rho: f64, t: f64, y: f64) -> f64 {
    let q = y / alpha;
    q * (q.ln() + rho * t - 1.0)
}

/// Expected-utility integrand along a path: running consumption plus terminal wealth.
fn lifetime_utility(alpha: f64, rho: f64, t: &[f64], c: &[f64], x_t: f64, dt: f64) -> f64 {
    let u: Vec<f64> = t.iter().zip(c).map(|(&t, &c)| utility(alpha, rho, t, c)).collect();
    trapezoid(&u, dt) + utility(alpha, rho, t[t.len() - 1], x_t)
}

/// Consumption and terminal wealth of `agent` after applying `pert`.
pub fn perturbed_plan(p: &EquilibriumPath, pert: &Perturbation) -> Result<(Vec<f64>, f64)> {
    pert.validate()?;
    let dt = p.dt();
    let horizon = p.t[p.len() - 1];
    let (c, x) = if pert.agent() == 1 { (&p.c1, &p.x1) } else { (&p.c2, &p.x2) };
    let last = p.len() - 1;
    let mut out = Vec::with_capacity(p.len());
    let shift = match *pert {
        Perturbation::ConsumptionShift { delta, until, .. } => {
            let mut dtheta = 0.0;
            for n in 0..p.len() {
                let on = if p.t[n] < until * horizon { delta } else { 0.0 };
                out.push(c[n] + on);
                if n < last {
                    dtheta += dt * (dtheta - on) / p.a[n];
                }
                if !(dtheta.is_finite() && dtheta.abs() <= MAX_HOLDING_SHIFT) {
                    return Err(CoreError::RejectedPerturbation(format!(
                        "{}: holdings reach {dtheta} on path {}",
                        pert.label(),
                        p.index
                    )));
                }
            }
            dtheta
        }
        Perturbation::HoldingBump { epsilon, .. } => {
            let w = std::f64::consts::PI / horizon;
            for n in 0..p.len() {
                let b = epsilon * (w * p.t[n]).sin();
                let db = epsilon * w * (w * p.t[n]).cos();
                out.push(c[n] + b - p.a[n] * db);
            }
            epsilon * (w * horizon).sin()
        }
    };
    Ok((out, x[last] + shift * p.a[last]))
}

/// Paired estimate of `(perturbed - candidate)` expected utility for each
/// menu item, with the mean absolute candidate utility as scale.
pub fn perturbation_estimates(ens: &Ensemble, menu: &[Perturbation]) -> Result<Vec<(Estimate, f64)>> {
    let model = ens.model;
    let per_path: Vec<Result<Vec<(f64, f64)>>> = ens.map(|p| {
        let dt = p.dt();
        let last = p.len() - 1;
        menu.iter()
            .map(|pert| {
                let (agent, c, x) = if pert.agent() == 1 {
                    (&model.agent1, &p.c1, p.x1[last])
                } else {
                    (&model.agent2, &p.c2, p.x2[last])
                };
                let base = lifetime_utility(agent.alpha, agent.rho, &p.t, c, x, dt);
                let (c_new, x_new) = perturbed_plan(p, pert)?;
                let alt = lifetime_utility(agent.alpha, agent.rho, &p.t, &c_new, x_new, dt);
                if !alt.is_finite() {
                    return Err(CoreError::RejectedPerturbation(format!("{}: utility is not finite", pert.label())));
                }
                Ok((alt - base, base))
            })
            .collect()
    })?;
    let gains: Vec<Vec<(f64, f64)>> = per_path.into_iter().collect::<Result<_>>()?;
    Ok((0..menu.len())
        .map(|k| {
            let diff: Vec<f64> = gains.iter().map(|v| v[k].0).collect();
            let scale = gains.iter().map(|v| v[k].1.abs()).sum::<f64>() / gains.len() as f64;
            (Estimate::from_samples(&diff), scale)
        })
        .collect())
}

/// Agent 1's duality gap per path,
/// `U-terms - conjugate terms - xi_0 X1_0`, with the mean absolute size of
/// the two sides as scale.
pub fn duality_gap(ens: &Ensemble, corrupt_kappa: Option<f64>) -> Result<(Estimate, f64)> {
    let model = ens.model;
    let (a1, r1) = (model.agent1.alpha, model.agent1.rho);
    let gaps = ens.map(|p| {
        let dt = p.dt();
        let xi = deflator(p, corrupt_kappa);
        let last = p.len() - 1;
        let primal = lifetime_utility(a1, r1, &p.t, &p.c1, p.x1[last], dt);
        let dual: Vec<f64> = p.t.iter().zip(&xi).map(|(&t, &y)| conjugate_utility(a1, r1, t, y)).collect();
        let dual = trapezoid(&dual, dt) + conjugate_utility(a1, r1, p.t[last], xi[last]);
        (primal - dual - xi[0] * p.x1[0], primal.abs() + dual.abs())
    })?;
    let g: Vec<f64> = gaps.iter().map(|v| v.0).collect();
    Ok((Estimate::from_samples(&g), gaps.iter().map(|v| v.1).sum::<f64>() / gaps.len() as f64))
}

/// Duality gap for agent 1, the perturbation menu, the martingale property
/// of agent 2's value process and the Feynman-Kac representation of `Y1`.
pub fn check_optimality(ens: &Ensemble, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    require_paths(ens)?;
    for p in &opts.perturbations {
        p.validate()?;
    }
    let model = ens.model;
    let dt = ens.dt();
    let times = ens.times();
    let (a2, r2) = (model.agent2.alpha, model.agent2.rho);
    let idx = checkpoint_indices(&opts.checkpoints, times.len() - 1);
    let mut out = Vec::new();

    // (a) duality gap
    let (e, scale) = duality_gap(ens, opts.corrupt_kappa)?;
    let allow = allowance(dt, scale);
    out.push(CheckResult::new(
        "duality_gap",
        e.mean.abs(),
        SE_MULTIPLIER * e.se + allow,
        e.n,
        format!("gap {:.3e} (se {:.2e}), allowance {allow:.2e}", e.mean, e.se),
    ));

    // (b) perturbations
    for (pert, (e, scale)) in opts.perturbations.iter().zip(perturbation_estimates(ens, &opts.perturbations)?) {
        let allow = allowance(dt, scale);
        out.push(CheckResult::new(
            format!("perturbation_{}", pert.label()),
            e.mean,
            SE_MULTIPLIER * e.se + allow,
            e.n,
            format!("utility change {:.4e} (se {:.2e}), allowance {allow:.2e}", e.mean, e.se),
        ));
    }

    // (c) agent 2 value process
    let value = ens.map(|p| {
        let run: Vec<f64> = p.t.iter().zip(&p.c2).map(|(&t, &c)| (-a2 * c - r2 * t).exp()).collect();
        let int = cumulative_trapezoid(&run, dt);
        let v: Vec<f64> = (0..p.len())
            .map(|n| -(-a2 * (p.theta2[n] + p.y2[n])).exp() * (-r2 * p.t[n]).exp() - int[n])
            .collect();
        let inc: Vec<f64> = idx.iter().map(|&n| v[n] - v[0]).collect();
        let mut lev = vec![v[0]];
        lev.extend(idx.iter().map(|&n| v[n]));
        (inc, lev)
    })?;
    let increments: Vec<Vec<f64>> = (0..idx.len()).map(|c| value.iter().map(|v| v.0[c]).collect()).collect();
    let levels: Vec<Vec<f64>> = (0..=idx.len()).map(|c| value.iter().map(|v| v.1[c]).collect()).collect();
    out.push(flatness("value_process_agent2", &times, &idx, &increments, &levels, dt));

    // (d) Feynman-Kac for Y1
    out.push(feynman_kac_y1(model, ens.source, ens.len(), opts.seed, opts.corrupt_driver_sign)?);
    Ok(out)
}

/// Re-simulates the dividend under the drift shift
/// `mu - alpha1 sigma^2 (1 - z2 - z_a / alpha_sigma)` and compares the
/// discounted integral representation of `Y1` with `y1(0, D0)`.
pub fn feynman_kac_y1(model: &MarketModel, source: &dyn FieldSource, n_paths: usize, seed: u64, flip_sign: bool) -> Result<CheckResult> {
    let p = Preferences::from(model);
    let (a1, r1) = (p.alpha1, p.rho1);
    let n_steps = source.n_steps();
    let dt = source.dt();
    let times = source.times();
    let (lo, hi) = source.domain();
    let rng = CounterRng::new(seed, domain::FEYNMAN_KAC);
    let sign = if flip_sign { -1.0 } else { 1.0 };
    let target = source.at_node(0, model.d0)?.0.y1;

    let samples: Vec<Option<(f64, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64)>> {
            let mut stream = rng.path(i as u64);
            let mut d = model.d0;
            let mut log_disc = 0.0;
            let mut f = Vec::with_capacity(n_steps + 1);
            let mut f_abs = Vec::with_capacity(n_steps + 1);
            let mut inv_a_prev = 0.0;
            for n in 0..=n_steps {
                if !(d >= lo && d <= hi) {
                    return Ok(None);
                }
                let t = times[n];
                let (s, _) = source.at_node(n, d)?;
                let (mu, sigma) = (model.mu_d(t, d), model.sigma_d(t, d));
                let inv_a = (-s.a).exp();
                if n > 0 {
                    log_disc -= 0.5 * dt * (inv_a_prev + inv_a);
                }
                inv_a_prev = inv_a;
                let w = p.premium_loading(s.z_a, s.z2);
                let g = -r1 / a1 + (1.0 + s.a) * inv_a / a1 - sign * 0.5 * a1 * sigma * sigma * w * w;
                let disc = log_disc.exp();
                f.push(disc * g);
                f_abs.push(disc * g.abs());
                if n < n_steps {
                    d += (mu - a1 * sigma * sigma * w) * dt + sigma * dt.sqrt() * stream.next_normal();
                }
            }
            Ok(Some((-trapezoid(&f, dt), trapezoid(&f_abs, dt))))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = samples.into_iter().flatten().collect();
    let excluded = n_paths - kept.len();
    if excluded as f64 > crate::equilibrium::MAX_EXCLUDED_FRACTION * n_paths as f64 {
        return Err(CoreError::GridCoverage { excluded, total: n_paths });
    }
    let values: Vec<f64> = kept.iter().map(|v| v.0).collect();
    let e = Estimate::from_samples(&values);
    let scale = target.abs() + kept.iter().map(|v| v.1).sum::<f64>() / kept.len() as f64;
    let allow = allowance(dt, scale);
    Ok(CheckResult::new(
        "feynman_kac_y1",
        (e.mean - target).abs(),
        SE_MULTIPLIER * e.se + allow,
        kept.len(),
        format!(
            "y1(0, D0) = {target:.6}, representation {:.6} (se {:.2e}), allowance {allow:.2e}, {excluded} paths left the domain",
            e.mean, e.se
        ),
    ))
}

// ---------------------------------------------------------------------------
// Benchmarks and bounds

/// Lower bound `-(alpha_sigma sup |mu| + rho_sigma) T` on the log annuity price.
pub fn a_lower_bound(model: &MarketModel) -> f64 {
    -(model.alpha_sigma * model.dividend.mu_sup() + model.rho_sigma) * model.horizon
}

/// Gronwall bound on `|y2|` given `a >= a_lo`.
///
/// On `a >= a_lo` the linear part of the `Y2` driver is bounded by
/// `K |y2| + c0` with `K = exp(-a_lo)` and
/// `c0 = (rho2 + max(1, |1 + a_lo| exp(-a_lo))) / alpha2`; the quadratic
/// part has a sign and is removed by a change of measure, so
/// `|y2| <= c0 (exp(K T) - 1) / K`.
pub fn gronwall_y2_bound(model: &MarketModel) -> f64 {
    let a_lo = a_lower_bound(model);
    let k = (-a_lo).exp();
    let b1 = 1.0f64.max((1.0 + a_lo).abs() * k);
    let c0 = (model.agent2.rho + b1) / model.agent2.alpha;
    c0 * ((k * model.horizon).exp() - 1.0) / k
}

/// `a >= a_lo - tol` and `|y2| <= Gronwall bound` over the whole solution.
pub fn check_bounds(model: &MarketModel, backend: &Backend) -> Vec<CheckResult> {
    let a_lo = a_lower_bound(model);
    let a_min = backend.a_min();
    let y2 = backend.y2_abs_max();
    let g = gronwall_y2_bound(model);
    vec![
        CheckResult::new(
            "bound_log_annuity",
            a_lo - a_min,
            BOUND_TOL,
            1,
            format!("min a = {a_min:.6e}, bound {a_lo:.6e}, margin {:.6e}", a_min - a_lo),
        ),
        CheckResult::new("bound_y2_gronwall", y2, g, 1, format!("max |y2| = {y2:.6e}, bound {g:.6e}, margin {:.6e}", g - y2)),
    ]
}

/// Strict Pareto comparisons `kappa > kappa_PE`, `r < r_PE` for constant
/// coefficients, followed by the bound checks.
pub fn check_benchmarks(model: &MarketModel, backend: &Backend) -> Result<Vec<CheckResult>> {
    let (r, kappa, r_pe, kappa_pe) = closed_form_constants(model)?;
    let mut out = vec![
        CheckResult::new(
            "pareto_kappa_gap",
            -(kappa - kappa_pe),
            0.0,
            1,
            format!("kappa = {kappa}, kappa_PE = {kappa_pe}, margin {}", kappa - kappa_pe),
        ),
        CheckResult::new("pareto_rate_gap", -(r_pe - r), 0.0, 1, format!("r = {r}, r_PE = {r_pe}, margin {}", r_pe - r)),
    ];
    // strict inequalities
    for c in &mut out {
        c.passed = c.statistic < 0.0;
    }
    out.extend(check_bounds(model, backend));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full battery

/// Everything needed to run the battery on one resolution.
pub struct Prepared {
    pub solved: Solved,
    pub paths: DividendPaths,
}

pub fn prepare(model: &MarketModel, spec: &GridSpec, truncation: &TruncationConfig, n_paths: usize, seed: u64) -> Result<Prepared> {
    let solved = solve(model, spec, truncation)?;
    let paths = simulate_dividend_paths(model, solved.n_steps, n_paths, seed)?;
    Ok(Prepared { solved, paths })
}

/// Runs every check on a prepared solution. With `opts.refine_clearing` the
/// clearing check is repeated with twice as many time steps.
pub fn run_checks(model: &MarketModel, spec: &GridSpec, prepared: &Prepared, opts: &VerifyOptions) -> Result<VerificationReport> {
    let backend = &prepared.solved.backend;
    let ens = Ensemble::new(model, backend.as_source(), &prepared.paths)?;
    require_paths(&ens)?;
    let mut checks = Vec::new();
    let clearing = check_clearing(&ens)?;
    checks.extend(clearing.iter().cloned());
    if opts.refine_clearing {
        let fine_spec = GridSpec {
            n_time: 2 * prepared.solved.n_steps,
            ..*spec
        };
        let trunc = prepared.solved.truncation.map_or(TruncationConfig::fixed(4), |t| TruncationConfig::fixed(t.n));
        let fine = prepare(model, &fine_spec, &trunc, prepared.paths.n_paths, prepared.paths.seed)?;
        let fine_ens = Ensemble::new(model, fine.solved.backend.as_source(), &fine.paths)?;
        checks.push(clearing_refinement(&clearing, &check_clearing(&fine_ens)?));
    }
    checks.extend(check_martingales(&ens, &opts.checkpoints, opts.corrupt_kappa)?);
    checks.extend(check_residuals(model, backend, &ens, opts.identity_samples, opts.seed)?);
    checks.extend(check_optimality(&ens, opts)?);
    if model.is_constant() {
        checks.extend(check_benchmarks(model, backend)?);
    } else {
        checks.extend(check_bounds(model, backend));
    }
    let s = prepared.solved.summary(spec.n_time);
    let metadata = RunMetadata {
        backend: s.backend.to_string(),
        n_steps: s.n_steps,
        dt: ens.dt(),
        d_min: s.d_min,
        d_max: s.d_max,
        n_space: s.n_space,
        truncation_n: s.truncation_n,
        n_paths: prepared.paths.n_paths,
        excluded_paths: ens.excluded,
        seed: prepared.paths.seed,
        corrupt_kappa: opts.corrupt_kappa,
        corrupt_driver_sign: opts.corrupt_driver_sign,
    };
    Ok(VerificationReport::new(model, metadata, checks))
}

/// Solves, simulates and runs the full battery.
pub fn verify(model: &MarketModel, spec: &GridSpec, truncation: &TruncationConfig, n_paths: usize, opts: &VerifyOptions) -> Result<VerificationReport> {
    let prepared = prepare(model, spec, truncation, n_paths, opts.seed)?;
    run_checks(model, spec, &prepared, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Golden-section maximisation of `U(t, c) - y c` over `c`.
    fn numeric_conjugate(alpha: f64, rho: f64, t: f64, y: f64) -> f64 {
        let f = |c: f64| utility(alpha, rho, t, c) - y * c;
        let (mut lo, mut hi) = (-60.0f64, 60.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if f(x1) < f(x2) {
                lo = x1;
            } else {
                hi = x2;
            }
        }
        f(0.5 * (lo + hi))
    }

    proptest! {
        #[test]
        fn conjugate_matches_numeric_sup(alpha in 0.2f64..5.0, rho in 0.0f64..1.0, t in 0.0f64..2.0, ly in -3.0f64..3.0) {
            let y = ly.exp();
            let closed = conjugate_utility(alpha, rho, t, y);
            let numeric = numeric_conjugate(alpha, rho, t, y);
            prop_assert!((closed - numeric).abs() <= 1e-9 * (1.0 + closed.abs()), "{closed} vs {numeric}");
        }

        #[test]
        fn fenchel_equality_at_marginal_utility(alpha in 0.2f64..5.0, rho in 0.0f64..1.0, t in 0.0f64..2.0, c in -3.0f64..3.0) {
            let y = alpha * (-rho * t - alpha * c).exp();
            let lhs = utility(alpha, rho, t, c);
            let rhs = conjugate_utility(alpha, rho, t, y) + y * c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + y * c.abs()));
        }
    }

    #[test]
    fn menu_is_admissible() {
        for p in default_menu() {
            p.validate().unwrap();
        }
        let bad = Perturbation::ConsumptionShift {
            agent: 2,
            delta: f64::INFINITY,
            until: 0.5,
        };
        assert!(matches!(bad.validate(), Err(CoreError::RejectedPerturbation(_))));
        let bad = Perturbation::HoldingBump { agent: 3, epsilon: 0.1 };
        assert!(matches!(bad.validate(), Err(CoreError::RejectedPerturbation(_))));
    }

    #[test]
    fn p_star_bounds() {
        let a = crate::AgentParams::new(2.0, 0.0, 0.5).unwrap();
        let m = MarketModel::new(a, a, 1.0, 1.0, crate::DividendPreset::Constant { mu: 0.0, sigma: 1.0 }, 1.0).unwrap();
        assert_eq!(a_lower_bound(&m), 0.0);
        assert!((gronwall_y2_bound(&m) - 0.5 * (std::f64::consts::E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn checkpoints_snap_to_nodes() {
        assert_eq!(checkpoint_indices(&[0.0, 0.25, 0.5, 1.0], 445), vec![0, 111, 223, 445]);
    }

    #[test]
    fn report_overall_ignores_informational() {
        let a = crate::AgentParams::new(2.0, 0.0, 0.5).unwrap();
        let m = MarketModel::new(a, a, 1.0, 1.0, crate::DividendPreset::Constant { mu: 0.0, sigma: 1.0 }, 1.0).unwrap();
        let meta = RunMetadata {
            backend: "ode".into(),
            n_steps: 1,
            dt: 1.0,
            d_min: None,
            d_max: None,
            n_space: None,
            truncation_n: None,
            n_paths: 0,
            excluded_paths: 0,
            seed: 0,
            corrupt_kappa: None,
            corrupt_driver_sign: false,
        };
        let ok = CheckResult::new("a", 0.0, 1.0, 1, String::new());
        let info = CheckResult::new("b", 2.0, 1.0, 1, String::new()).informational();
        assert!(VerificationReport::new(&m, meta.clone(), vec![ok.clone(), info]).overall_pass);
        let bad = CheckResult::new("c", f64::NAN, 1.0, 1, String::new());
        assert!(!bad.passed);
        assert!(!VerificationReport::new(&m, meta, vec![ok, bad]).overall_pass);
        assert_eq!(fingerprint(&m), fingerprint(&m.clone()));
    }
}
