//! Explicit backward finite differences for the Markovian BSDE fields
//! `a(t, d)`, `Y1(t, d)`, `Y2(t, d)` on a uniform `(t, d)` grid.
//!
//! The `(a, Y2)` pair is advanced in diagonal form `(Y_sigma, Y2)` with the
//! truncated drivers; `Y1` is then solved against the frozen `(a, Y2)` fields.
//! Volatility loadings are spatial derivatives of the value fields.

use serde::{Deserialize, Serialize};

use crate::bsde::{clamp, from_diagonal, BsdeState, DiagonalState, Preferences, TruncationConfig, TruncationMode};
use crate::error::{CoreError, Result};
use crate::market_model::{probe_mesh, uniform_times, validate_model, MarketModel};

/// Fields may not leave `[-DIVERGENCE_FACTOR N, DIVERGENCE_FACTOR N]`.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Largest acceptable change when the truncation level is doubled.
pub const TRUNCATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_time: usize,
    pub n_space: usize,
    pub coverage_k: f64,
    pub cfl_safety: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_time: 400,
            n_space: 200,
            coverage_k: 5.0,
            cfl_safety: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub horizon: f64,
    pub n_time: usize,
    pub n_space: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub cfl_safety: f64,
    /// Largest dividend volatility over the spatial domain.
    pub sigma_max: f64,
    /// Time steps requested before the stability adjustment.
    pub requested_n_time: usize,
}

impl Grid {
    /// Grid on explicit bounds; `sigma_max` is measured on the nodes.
    pub fn with_bounds(model: &MarketModel, n_time: usize, n_space: usize, d_min: f64, d_max: f64, cfl_safety: f64) -> Result<Self> {
        if n_time == 0 || n_space < 2 || !(d_max > d_min) || !(cfl_safety > 0.0 && cfl_safety <= 1.0) {
            return Err(CoreError::InvalidParameter {
                name: "grid",
                reason: format!(
                    "need n_time >= 1, n_space >= 2, d_min < d_max and 0 < cfl_safety <= 1 \
                     (got {n_time}, {n_space}, [{d_min}, {d_max}], {cfl_safety})"
                ),
            });
        }
        let mut grid = Self {
            horizon: model.horizon,
            n_time,
            n_space,
            d_min,
            d_max,
            cfl_safety,
            sigma_max: 0.0,
            requested_n_time: n_time,
        };
        grid.sigma_max = (0..=n_space)
            .flat_map(|j| {
                let d = grid.node(j);
                (0..=4).map(move |k| (model.horizon * k as f64 / 4.0, d))
            })
            .map(|(t, d)| model.sigma_d(t, d))
            .fold(0.0, f64::max);
        Ok(grid)
    }

    /// Grid centred on `D0` covering `coverage_k` standard deviations of the
    /// dividend over the horizon. The number of time steps is raised when
    /// needed so that the explicit scheme is stable.
    pub fn build(model: &MarketModel, spec: &GridSpec) -> Result<Self> {
        if !(spec.coverage_k > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "coverage_k",
                reason: format!("must be > 0, got {}", spec.coverage_k),
            });
        }
        // sigma <= M, so this window contains every candidate domain
        let wide = spec.coverage_k * model.bound_m * model.horizon.sqrt();
        let probe = probe_mesh(model, model.d0 - wide, model.d0 + wide, 9, 4001);
        validate_model(model, &probe)?;
        let sigma_max = probe
            .iter()
            .map(|&(t, d)| model.sigma_d(t, d))
            .fold(0.0, f64::max);
        let half = spec.coverage_k * sigma_max * model.horizon.sqrt();
        let mut grid = Self::with_bounds(model, spec.n_time, spec.n_space, model.d0 - half, model.d0 + half, spec.cfl_safety)?;
        grid.sigma_max = grid.sigma_max.max(sigma_max);
        grid.n_time = grid.n_time.max(grid.min_stable_n_time());
        grid.requested_n_time = spec.n_time;
        Ok(grid)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_time as f64
    }

    pub fn dx(&self) -> f64 {
        (self.d_max - self.d_min) / self.n_space as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.horizon * n as f64 / self.n_time as f64
    }

    pub fn times(&self) -> Vec<f64> {
        uniform_times(self.horizon, self.n_time)
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.n_space {
            self.d_max
        } else {
            self.d_min + j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_space).map(|j| self.node(j)).collect()
    }

    /// Fewest time steps with `dt <= safety dx^2 / sigma_max^2`.
    pub fn min_stable_n_time(&self) -> usize {
        let dx = self.dx();
        let dt_max = self.cfl_safety * dx * dx / (self.sigma_max * self.sigma_max);
        ((self.horizon / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    pub fn check_cfl(&self) -> Result<()> {
        let min_steps = self.min_stable_n_time();
        if self.n_time < min_steps {
            return Err(CoreError::StepSize {
                reason: format!(
                    "dt = {} exceeds {} * dx^2 / sigma_max^2 with dx = {}, sigma_max = {}",
                    self.dt(),
                    self.cfl_safety,
                    self.dx(),
                    self.sigma_max
                ),
                min_steps,
            });
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.n_space + 1
    }
}

/// Diagnostics of one backward step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepDiagnostics {
    /// Largest absolute change of `(Y_sigma, Y2)` over the step.
    pub max_update: f64,
    /// Whether any node used a clamped `a` or `y2` in the driver.
    pub truncation_active: bool,
}

/// Solved fields, row-major with one row per time step.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionField {
    pub grid: Grid,
    /// Truncation level used in the drivers.
    pub truncation_n: f64,
    pub a: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub z_a: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// Indexed by time step, `diagnostics[n]` describes the step `n + 1 -> n`.
    pub diagnostics: Vec<StepDiagnostics>,
    /// True when the truncation never bit anywhere in the solve.
    pub lifted: bool,
}

/// Central first difference in the interior, one-sided at the boundaries.
#[inline]
fn first_diff(u: &[f64], j: usize, dx: f64) -> f64 {
    let last = u.len() - 1;
    if j == 0 {
        (u[1] - u[0]) / dx
    } else if j == last {
        (u[last] - u[last - 1]) / dx
    } else {
        (u[j + 1] - u[j - 1]) / (2.0 * dx)
    }
}

/// Second difference in the interior, zero at the boundaries.
#[inline]
fn second_diff(u: &[f64], j: usize, dx: f64) -> f64 {
    if j == 0 || j == u.len() - 1 {
        0.0
    } else {
        (u[j + 1] - 2.0 * u[j] + u[j - 1]) / (dx * dx)
    }
}

fn derivative_row(u: &[f64], dx: f64) -> Vec<f64> {
    (0..u.len()).map(|j| first_diff(u, j, dx)).collect()
}

fn check_band(row: &[f64], field: &'static str, step: usize, n: f64) -> Result<()> {
    let bound = DIVERGENCE_FACTOR * n;
    if row.iter().all(|v| v.is_finite() && v.abs() <= bound) {
        Ok(())
    } else {
        Err(CoreError::Divergence { field, step, bound })
    }
}

/// Solves the fields with a fixed truncation level `n`.
pub fn solve_fields(model: &MarketModel, grid: &Grid, truncation: &TruncationConfig) -> Result<SolutionField> {
    if truncation.n < 1 {
        return Err(CoreError::InvalidParameter {
            name: "truncation.N",
            reason: "must be >= 1".into(),
        });
    }
    grid.check_cfl()?;
    let n_trunc = truncation.n as f64;
    let p = Preferences::from(model);
    let (w, dt, dx) = (grid.width(), grid.dt(), grid.dx());
    let nodes = grid.nodes();
    let rows = grid.n_time + 1;

    let mut a = vec![0.0; rows * w];
    let mut y2 = vec![0.0; rows * w];
    let mut diagnostics = vec![StepDiagnostics::default(); grid.n_time];

    // working rows for the diagonal pair at level n + 1
    let mut ys_next = vec![0.0; w];
    let mut y2_next = vec![0.0; w];
    let mut ys_new = vec![0.0; w];
    let mut y2_new = vec![0.0; w];
    let mut lifted = true;

    for n in (0..grid.n_time).rev() {
        let t = grid.time(n + 1);
        let mut diag = StepDiagnostics::default();
        for j in 0..w {
            let d = nodes[j];
            let (mu, sigma) = (model.mu_d(t, d), model.sigma_d(t, d));
            let z_sigma = first_diff(&ys_next, j, dx);
            let z2 = first_diff(&y2_next, j, dx);
            let state = DiagonalState::new(ys_next[j], z_sigma, y2_next[j], z2);
            let (a_val, ..) = from_diagonal(p.alpha_sigma, &state);
            let a_hat = a_val.max(-n_trunc);
            let y2_hat = clamp(n_trunc, y2_next[j]);
            if a_hat != a_val || y2_hat != y2_next[j] {
                diag.truncation_active = true;
            }
            let g_sigma = p.drift_y_sigma(mu, sigma, a_hat, y2_hat, z_sigma);
            let g2 = p.drift_y2(sigma, a_hat, y2_hat, z2);
            let gen = |u: &[f64]| mu * first_diff(u, j, dx) + 0.5 * sigma * sigma * second_diff(u, j, dx);
            ys_new[j] = ys_next[j] + dt * (gen(&ys_next) - g_sigma);
            y2_new[j] = y2_next[j] + dt * (gen(&y2_next) - g2);
            diag.max_update = diag.max_update.max((ys_new[j] - ys_next[j]).abs()).max((y2_new[j] - y2_next[j]).abs());
        }
        let row = n * w..(n + 1) * w;
        for j in 0..w {
            let state = DiagonalState::new(ys_new[j], 0.0, y2_new[j], 0.0);
            a[row.start + j] = from_diagonal(p.alpha_sigma, &state).0;
            y2[row.start + j] = y2_new[j];
        }
        check_band(&a[row.clone()], "a", n, n_trunc)?;
        check_band(&y2[row.clone()], "y2", n, n_trunc)?;
        lifted &= !diag.truncation_active;
        diagnostics[n] = diag;
        std::mem::swap(&mut ys_next, &mut ys_new);
        std::mem::swap(&mut y2_next, &mut y2_new);
    }

    let y1 = solve_y1_field(model, grid, n_trunc, &a, &y2)?;
    let z_a = derivative_field(grid, &a);
    let z1 = derivative_field(grid, &y1);
    let z2 = derivative_field(grid, &y2);
    Ok(SolutionField {
        grid: grid.clone(),
        truncation_n: n_trunc,
        a,
        y1,
        y2,
        z_a,
        z1,
        z2,
        diagnostics,
        lifted,
    })
}

/// Spatial derivative of every time slice of a field.
pub fn derivative_field(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let w = grid.width();
    u.chunks(w).flat_map(|row| derivative_row(row, grid.dx())).collect()
}

/// Solves `Y1` backward against frozen `a` and `Y2` fields. Inside the band
/// `a >= -n_trunc` the driver is the untruncated one.
pub fn solve_y1_field(model: &MarketModel, grid: &Grid, n_trunc: f64, a: &[f64], y2: &[f64]) -> Result<Vec<f64>> {
    let (w, dt, dx) = (grid.width(), grid.dt(), grid.dx());
    let rows = grid.n_time + 1;
    if a.len() != rows * w || y2.len() != rows * w {
        return Err(CoreError::GridMismatch(format!(
            "frozen fields have {} and {} entries, grid needs {}",
            a.len(),
            y2.len(),
            rows * w
        )));
    }
    let p = Preferences::from(model);
    let nodes = grid.nodes();
    let mut y1 = vec![0.0; rows * w];
    for n in (0..grid.n_time).rev() {
        let t = grid.time(n + 1);
        let next = (n + 1) * w..(n + 2) * w;
        let (a_row, y2_row) = (&a[next.clone()], &y2[next.clone()]);
        let (head, tail) = y1.split_at_mut((n + 1) * w);
        let y1_next = &tail[..w];
        let y1_new = &mut head[n * w..];
        for j in 0..w {
            let d = nodes[j];
            let (mu, sigma) = (model.mu_d(t, d), model.sigma_d(t, d));
            let state = BsdeState {
                a: a_row[j].max(-n_trunc),
                y1: y1_next[j],
                y2: y2_row[j],
                z_a: first_diff(a_row, j, dx),
                z1: first_diff(y1_next, j, dx),
                z2: first_diff(y2_row, j, dx),
            };
            let g1 = p.drift_y1(sigma, &state);
            let gen = mu * state.z1 + 0.5 * sigma * sigma * second_diff(y1_next, j, dx);
            y1_new[j] = y1_next[j] + dt * (gen - g1);
        }
        check_band(&y1[n * w..(n + 1) * w], "y1", n, n_trunc)?;
    }
    Ok(y1)
}

/// Result of the truncation ladder.
#[derive(Debug, Clone)]
pub struct TruncationOutcome {
    pub config: TruncationConfig,
    pub field: SolutionField,
    /// Largest change of `(a, y1, y2)` when the level is doubled once more.
    pub doubled_change: f64,
}

/// Largest absolute difference of the value fields.
pub fn max_field_difference(x: &SolutionField, y: &SolutionField) -> f64 {
    [(&x.a, &y.a), (&x.y1, &y.y1), (&x.y2, &y.y2)]
        .iter()
        .flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Runs the ladder `N = 4, 8, 16, ...` up to `n_max` and returns the first
/// level whose solution stays strictly inside the band and is unchanged by
/// one more doubling.
pub fn auto_truncation(model: &MarketModel, grid: &Grid, n_max: u32) -> Result<TruncationOutcome> {
    auto_truncation_from(model, grid, 4, n_max)
}

/// Same ladder starting from `n_start`.
pub fn auto_truncation_from(model: &MarketModel, grid: &Grid, n_start: u32, n_max: u32) -> Result<TruncationOutcome> {
    let mut n = n_start.max(1);
    while n <= n_max {
        let config = TruncationConfig::fixed(n);
        let field = match solve_fields(model, grid, &config) {
            Ok(f) => f,
            Err(CoreError::Divergence { .. }) => {
                n *= 2;
                continue;
            }
            Err(e) => return Err(e),
        };
        let nf = n as f64;
        let a_min = field.a.iter().copied().fold(f64::INFINITY, f64::min);
        let y2_max = field.y2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if a_min >= -nf + 1.0 && y2_max <= nf - 1.0 {
            let doubled = solve_fields(model, grid, &TruncationConfig::fixed(2 * n))?;
            let change = max_field_difference(&field, &doubled);
            if change <= TRUNCATION_TOL {
                return Ok(TruncationOutcome {
                    config: TruncationConfig {
                        n,
                        mode: TruncationMode::Auto,
                        n0: Some(n),
                        n_max,
                    },
                    field,
                    doubled_change: change,
                });
            }
        }
        n *= 2;
    }
    Err(CoreError::TruncationFailure { n_max })
}

impl SolutionField {
    fn width(&self) -> usize {
        self.grid.width()
    }

    /// Node values at `(time step n, space node j)`.
    pub fn node(&self, n: usize, j: usize) -> BsdeState {
        let k = n * self.width() + j;
        BsdeState {
            a: self.a[k],
            y1: self.y1[k],
            y2: self.y2[k],
            z_a: self.z_a[k],
            z1: self.z1[k],
            z2: self.z2[k],
        }
    }

    /// Row `n` of a field as a slice.
    pub fn row<'a>(&self, field: &'a [f64], n: usize) -> &'a [f64] {
        let w = self.width();
        &field[n * w..(n + 1) * w]
    }

    /// Cell index and weight for `d`; nodes are hit exactly.
    fn locate_space(&self, d: f64) -> Result<(usize, f64)> {
        let g = &self.grid;
        if !(d >= g.d_min && d <= g.d_max) {
            return Err(CoreError::Extrapolation {
                d,
                d_min: g.d_min,
                d_max: g.d_max,
            });
        }
        Ok(locate(d - g.d_min, g.dx(), g.n_space))
    }

    /// Bilinear interpolation of all six fields at `(t, d)`.
    pub fn sample(&self, t: f64, d: f64) -> Result<BsdeState> {
        let (j, wx) = self.locate_space(d)?;
        let (n, wt) = locate(t.clamp(0.0, self.grid.horizon), self.grid.dt(), self.grid.n_time);
        let lerp = |u: &[f64]| {
            let w = self.width();
            let at = |n: usize| {
                let row = &u[n * w..(n + 1) * w];
                if wx == 0.0 {
                    row[j]
                } else {
                    (1.0 - wx) * row[j] + wx * row[j + 1]
                }
            };
            if wt == 0.0 {
                at(n)
            } else {
                (1.0 - wt) * at(n) + wt * at(n + 1)
            }
        };
        Ok(BsdeState {
            a: lerp(&self.a),
            y1: lerp(&self.y1),
            y2: lerp(&self.y2),
            z_a: lerp(&self.z_a),
            z1: lerp(&self.z1),
            z2: lerp(&self.z2),
        })
    }

    /// Linear interpolation in `d` on time row `n`, plus the `d`-slopes of
    /// `(z_a, z1, z2)` of the interpolant.
    pub fn sample_row(&self, n: usize, d: f64) -> Result<(BsdeState, [f64; 3])> {
        let (j, wx) = self.locate_space(d)?;
        let w = self.width();
        let k = n * w + j;
        let dx = self.grid.dx();
        let lerp = |u: &[f64]| if wx == 0.0 { u[k] } else { (1.0 - wx) * u[k] + wx * u[k + 1] };
        let slope = |u: &[f64]| {
            // j == n_space only when d == d_max; use the last cell
            let k = if j == self.grid.n_space { k - 1 } else { k };
            (u[k + 1] - u[k]) / dx
        };
        Ok((
            BsdeState {
                a: lerp(&self.a),
                y1: lerp(&self.y1),
                y2: lerp(&self.y2),
                z_a: lerp(&self.z_a),
                z1: lerp(&self.z1),
                z2: lerp(&self.z2),
            },
            [slope(&self.z_a), slope(&self.z1), slope(&self.z2)],
        ))
    }

    pub fn a_min(&self) -> f64 {
        self.a.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn y2_abs_max(&self) -> f64 {
        self.y2.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Spatial index of the node closest to `d`.
    pub fn nearest_node(&self, d: f64) -> usize {
        let s = ((d - self.grid.d_min) / self.grid.dx()).round();
        (s.max(0.0) as usize).min(self.grid.n_space)
    }

    /// Per-step BSDE residual, divided by `dt`, at interior nodes.
    ///
    /// The scheme evaluates drivers and differences at level `n + 1`; this
    /// residual re-evaluates them at level `n` with the untruncated drivers,
    /// so it measures first-order consistency rather than solver round-off.
    /// Returns the maxima for `(a, y1, y2)`.
    pub fn bsde_residual(&self, model: &MarketModel, n: usize) -> Result<[f64; 3]> {
        let p = Preferences::from(model);
        let (w, dt, dx) = (self.width(), self.grid.dt(), self.grid.dx());
        let t = self.grid.time(n);
        let fields = [&self.a, &self.y1, &self.y2];
        let mut out = [0.0f64; 3];
        for j in 1..w - 1 {
            let d = self.grid.node(j);
            let (mu, sigma) = (model.mu_d(t, d), model.sigma_d(t, d));
            let s = self.node(n, j);
            crate::bsde::driver_a(model, t, d, &s)?;
            let g = [
                p.drift_a(mu, sigma, s.a, s.z_a, s.z2),
                p.drift_y1(sigma, &s),
                p.drift_y2(sigma, s.a, s.y2, s.z2),
            ];
            for (i, u) in fields.iter().enumerate() {
                let row = &u[n * w..(n + 1) * w];
                let next = u[(n + 1) * w + j];
                let gen = mu * first_diff(row, j, dx) + 0.5 * sigma * sigma * second_diff(row, j, dx);
                let res = (next - row[j] - dt * (g[i] - gen)) / dt;
                out[i] = out[i].max(res.abs());
            }
        }
        Ok(out)
    }
}

/// `(index, weight)` with `x = (index + weight) h`, `index < cells` unless
/// `x` sits on the last node; values within 1e-9 cells of a node snap to it.
pub(crate) fn locate(x: f64, h: f64, cells: usize) -> (usize, f64) {
    let s = x / h;
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        let i = (r.max(0.0) as usize).min(cells);
        return (i, 0.0);
    }
    let i = (s.floor().max(0.0) as usize).min(cells - 1);
    (i, s - i as f64)
}
