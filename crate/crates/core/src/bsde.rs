//! Drivers of the three-dimensional quadratic BSDE system, their truncated
//! versions, and the linear change of variables that makes the `(a, Y2)`
//! subsystem diagonally quadratic.
//!
//! Sign convention: every equation reads `dY = sigma_D Z dB + g dt`, so the
//! drift `g` is what the functions below return.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::market_model::MarketModel;

/// Unknowns of the BSDE system at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BsdeState {
    /// Log annuity price.
    pub a: f64,
    pub y1: f64,
    pub y2: f64,
    pub z_a: f64,
    pub z1: f64,
    pub z2: f64,
}

impl BsdeState {
    pub fn is_finite(&self) -> bool {
        [self.a, self.y1, self.y2, self.z_a, self.z1, self.z2]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// State of the diagonal system `(Y_sigma, Y2)` with
/// `Y_sigma = a + alpha_sigma Y2`.
///
/// `to_diagonal` records the rounding error of the forward map in the carry
/// fields so that `from_diagonal` reproduces `a` and `z_a` bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiagonalState {
    pub y_sigma: f64,
    pub z_sigma: f64,
    pub y2: f64,
    pub z2: f64,
    a_carry: f64,
    za_carry: f64,
}

impl DiagonalState {
    pub fn new(y_sigma: f64, z_sigma: f64, y2: f64, z2: f64) -> Self {
        Self {
            y_sigma,
            z_sigma,
            y2,
            z2,
            a_carry: 0.0,
            za_carry: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    Fixed,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// Truncation level used by the solver.
    pub n: u32,
    pub mode: TruncationMode,
    /// Level selected by the auto ladder, once found.
    pub n0: Option<u32>,
    /// Upper end of the auto ladder.
    pub n_max: u32,
}

impl TruncationConfig {
    pub fn fixed(n: u32) -> Self {
        Self {
            n: n.max(1),
            mode: TruncationMode::Fixed,
            n0: None,
            n_max: n.max(1),
        }
    }

    pub fn auto(n_max: u32) -> Self {
        Self {
            n: 4,
            mode: TruncationMode::Auto,
            n0: None,
            n_max,
        }
    }
}

/// `min(N, max(-N, x))`.
#[inline]
pub fn clamp(n: f64, x: f64) -> f64 {
    n.min((-n).max(x))
}

/// Preference constants used by every driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preferences {
    pub alpha1: f64,
    pub alpha2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub alpha_sigma: f64,
    pub rho_sigma: f64,
}

impl From<&MarketModel> for Preferences {
    fn from(m: &MarketModel) -> Self {
        Self {
            alpha1: m.agent1.alpha,
            alpha2: m.agent2.alpha,
            rho1: m.agent1.rho,
            rho2: m.agent2.rho,
            alpha_sigma: m.alpha_sigma,
            rho_sigma: m.rho_sigma,
        }
    }
}

impl Preferences {
    /// `1 - z2 - z_a / alpha_sigma`, the loading that drives agent 1's risk premium.
    #[inline]
    pub fn premium_loading(&self, z_a: f64, z2: f64) -> f64 {
        1.0 - z2 - z_a / self.alpha_sigma
    }

    /// `(1 + a + alpha y) exp(-a) / alpha`.
    #[inline]
    fn annuity_term(alpha: f64, a: f64, y: f64) -> f64 {
        (1.0 + a + alpha * y) * (-a).exp() / alpha
    }

    #[inline]
    pub fn drift_a(&self, mu: f64, sigma: f64, a: f64, z_a: f64, z2: f64) -> f64 {
        let s2 = sigma * sigma;
        let w = self.premium_loading(z_a, z2);
        -(-a).exp() + self.alpha_sigma * mu + self.rho_sigma
            - 0.5 * self.alpha_sigma * self.alpha2 * s2 * z2 * z2
            - 0.5 * self.alpha_sigma * self.alpha1 * s2 * w * w
    }

    #[inline]
    pub fn drift_y1(&self, sigma: f64, s: &BsdeState) -> f64 {
        let s2 = sigma * sigma;
        let w = self.premium_loading(s.z_a, s.z2);
        -self.rho1 / self.alpha1 + Self::annuity_term(self.alpha1, s.a, s.y1)
            - 0.5 * self.alpha1 * s2 * w * w
            + self.alpha1 * s2 * s.z1 * w
    }

    #[inline]
    pub fn drift_y2(&self, sigma: f64, a: f64, y2: f64, z2: f64) -> f64 {
        -self.rho2 / self.alpha2
            + Self::annuity_term(self.alpha2, a, y2)
            + 0.5 * self.alpha2 * sigma * sigma * z2 * z2
    }

    /// Diagonal driver for `Y_sigma`, evaluated with an already truncated
    /// log annuity `a_hat` and clamped `y2_hat`.
    #[inline]
    pub fn drift_y_sigma(&self, mu: f64, sigma: f64, a_hat: f64, y2_hat: f64, z_sigma: f64) -> f64 {
        let q = 1.0 - z_sigma / self.alpha_sigma;
        self.alpha_sigma
            * (mu + self.rho1 / self.alpha1 - 0.5 * self.alpha1 * sigma * sigma * q * q
                + (-a_hat).exp()
                    * (-1.0 / self.alpha_sigma
                        + (1.0 + self.alpha2 * y2_hat + a_hat) / self.alpha2))
    }
}

fn check_range(a: f64) -> Result<()> {
    if (-a).exp().is_finite() {
        Ok(())
    } else {
        Err(CoreError::Range { a })
    }
}

pub fn driver_a(model: &MarketModel, t: f64, d: f64, s: &BsdeState) -> Result<f64> {
    check_range(s.a)?;
    let p = Preferences::from(model);
    Ok(p.drift_a(model.mu_d(t, d), model.sigma_d(t, d), s.a, s.z_a, s.z2))
}

pub fn driver_y1(model: &MarketModel, t: f64, d: f64, s: &BsdeState) -> Result<f64> {
    check_range(s.a)?;
    Ok(Preferences::from(model).drift_y1(model.sigma_d(t, d), s))
}

pub fn driver_y2(model: &MarketModel, t: f64, d: f64, s: &BsdeState) -> Result<f64> {
    check_range(s.a)?;
    Ok(Preferences::from(model).drift_y2(model.sigma_d(t, d), s.a, s.y2, s.z2))
}

/// `a` driver with `exp(-a)` replaced by `exp(-max(a, -N))`.
pub fn driver_a_trunc(model: &MarketModel, n: f64, t: f64, d: f64, s: &BsdeState) -> f64 {
    let p = Preferences::from(model);
    p.drift_a(model.mu_d(t, d), model.sigma_d(t, d), s.a.max(-n), s.z_a, s.z2)
}

/// `Y2` driver with `a -> max(a, -N)` and `y2 -> m_N(y2)`.
pub fn driver_y2_trunc(model: &MarketModel, n: f64, t: f64, d: f64, s: &BsdeState) -> f64 {
    let p = Preferences::from(model);
    p.drift_y2(model.sigma_d(t, d), s.a.max(-n), clamp(n, s.y2), s.z2)
}

pub fn driver_g_sigma(model: &MarketModel, n: f64, t: f64, d: f64, s: &DiagonalState) -> f64 {
    let p = Preferences::from(model);
    let (a, _, _, _) = from_diagonal(p.alpha_sigma, s);
    p.drift_y_sigma(model.mu_d(t, d), model.sigma_d(t, d), a.max(-n), clamp(n, s.y2), s.z_sigma)
}

pub fn driver_g2_diag(model: &MarketModel, n: f64, t: f64, d: f64, s: &DiagonalState) -> f64 {
    let p = Preferences::from(model);
    let (a, _, _, _) = from_diagonal(p.alpha_sigma, s);
    p.drift_y2(model.sigma_d(t, d), a.max(-n), clamp(n, s.y2), s.z2)
}

pub fn to_diagonal(alpha_sigma: f64, s: &BsdeState) -> DiagonalState {
    let y_sigma = s.a + alpha_sigma * s.y2;
    let z_sigma = s.z_a + alpha_sigma * s.z2;
    let a_back = y_sigma - alpha_sigma * s.y2;
    let za_back = z_sigma - alpha_sigma * s.z2;
    DiagonalState {
        y_sigma,
        z_sigma,
        y2: s.y2,
        z2: s.z2,
        a_carry: s.a - a_back,
        za_carry: s.z_a - za_back,
    }
}

/// Returns `(a, z_a, y2, z2)`.
pub fn from_diagonal(alpha_sigma: f64, s: &DiagonalState) -> (f64, f64, f64, f64) {
    let a = (s.y_sigma - alpha_sigma * s.y2) + s.a_carry;
    let z_a = (s.z_sigma - alpha_sigma * s.z2) + s.za_carry;
    (a, z_a, s.y2, s.z2)
}

/// Constants `(c0, c1)` with `|g| <= c0 + c1 (z_a^2 + z1^2 + z2^2)` for the
/// truncated `a` and `Y2` drivers and the `Y1` driver on the band
/// `a >= -N`, `|y1|, |y2| <= N`.
pub fn growth_constants(model: &MarketModel, n: f64) -> (f64, f64) {
    let p = Preferences::from(model);
    let m = model.bound_m;
    let m2 = m * m;
    let en = n.exp();
    // sup over x >= -N of |1 + x| exp(-x)
    let lin = 1.0f64.max((n - 1.0).abs() * en);
    // w^2 <= 3 (1 + z2^2 + z_a^2 / alpha_sigma^2)
    let wq = 3.0 * (1.0 + 1.0 / (p.alpha_sigma * p.alpha_sigma));

    let c0_a = en + p.alpha_sigma * m + p.rho_sigma + 0.5 * p.alpha_sigma * p.alpha1 * m2 * 3.0;
    let c1_a = 0.5 * p.alpha_sigma * p.alpha2 * m2 + 0.5 * p.alpha_sigma * p.alpha1 * m2 * wq;

    let c0_2 = p.rho2 / p.alpha2 + lin / p.alpha2 + n * en;
    let c1_2 = 0.5 * p.alpha2 * m2;

    // |z1 w| <= (z1^2 + w^2) / 2
    let c0_1 = p.rho1 / p.alpha1 + lin / p.alpha1 + n * en + p.alpha1 * m2 * 3.0;
    let c1_1 = p.alpha1 * m2 * wq + 0.5 * p.alpha1 * m2;

    (c0_a.max(c0_2).max(c0_1), c1_a.max(c1_2).max(c1_1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{AgentParams, DividendPreset};
    use proptest::prelude::*;

    /// alpha1 = alpha2 = 2, rho = 0, mu = 0, sigma = 1.
    fn p_star() -> MarketModel {
        let a = AgentParams::new(2.0, 0.0, 0.5).unwrap();
        MarketModel::new(a, a, 1.0, 1.0, DividendPreset::Constant { mu: 0.0, sigma: 1.0 }, 1.0).unwrap()
    }

    fn tanh_model() -> MarketModel {
        let a1 = AgentParams::new(1.5, 0.05, 0.3).unwrap();
        let a2 = AgentParams::new(3.0, 0.1, 0.7).unwrap();
        let preset = DividendPreset::TanhBounded {
            mu0: 0.05,
            mu1: 0.1,
            sigma0: 1.0,
            sigma1: 0.4,
        };
        MarketModel::new(a1, a2, 1.0, 0.5, preset, 2.0).unwrap()
    }

    fn st(a: f64, y1: f64, y2: f64, z_a: f64, z1: f64, z2: f64) -> BsdeState {
        BsdeState { a, y1, y2, z_a, z1, z2 }
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp(2.0, 5.0), 2.0);
        assert_eq!(clamp(2.0, -5.0), -2.0);
        assert_eq!(clamp(2.0, 0.3), 0.3);
    }

    #[test]
    fn driver_a_examples() {
        let m = p_star();
        assert_eq!(driver_a(&m, 0.0, 0.0, &BsdeState::default()).unwrap(), -2.0);
        assert_eq!(driver_a(&m, 0.0, 0.0, &st(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)).unwrap(), -2.0);
        let big = driver_a(&m, 0.0, 0.0, &st(60.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((big + 1.0).abs() < 1e-20);
    }

    #[test]
    fn driver_y1_examples() {
        let m = p_star();
        assert_eq!(driver_y1(&m, 0.0, 0.0, &BsdeState::default()).unwrap(), -0.5);
        assert_eq!(driver_y1(&m, 0.0, 0.0, &st(0.0, 0.0, 0.0, 0.0, 1.0, 0.0)).unwrap(), 1.5);
        let base = driver_y1(&m, 0.0, 0.0, &st(0.0, 0.25, 0.0, 0.0, 0.0, 0.0)).unwrap();
        let shifted = driver_y1(&m, 0.0, 0.0, &st(0.0, 0.5, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((shifted - base - 0.25).abs() < 1e-15);
    }

    #[test]
    fn driver_y2_examples() {
        let m = p_star();
        assert_eq!(driver_y2(&m, 0.0, 0.0, &BsdeState::default()).unwrap(), 0.5);
        assert_eq!(driver_y2(&m, 0.0, 0.0, &st(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)).unwrap(), 1.5);
        assert_eq!(driver_y2(&m, 0.0, 0.0, &st(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn untruncated_drivers_report_overflow() {
        let m = p_star();
        let s = st(-800.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(driver_a(&m, 0.0, 0.0, &s), Err(CoreError::Range { .. })));
        assert!(driver_y1(&m, 0.0, 0.0, &s).is_err());
        assert!(driver_y2(&m, 0.0, 0.0, &s).is_err());
        assert!(driver_a_trunc(&m, 4.0, 0.0, 0.0, &s).is_finite());
        assert!(driver_y2_trunc(&m, 4.0, 0.0, 0.0, &s).is_finite());
    }

    #[test]
    fn truncated_driver_examples() {
        let m = p_star();
        assert_eq!(driver_y2_trunc(&m, 1.0, 0.0, 0.0, &st(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0)), 0.0);
        assert_eq!(driver_y2_trunc(&m, 1.0, 0.0, 0.0, &st(0.0, 0.0, 5.0, 0.0, 0.0, 0.0)), 1.5);
    }

    #[test]
    fn diagonal_driver_examples() {
        let m = p_star();
        let zero = DiagonalState::default();
        assert_eq!(driver_g_sigma(&m, 10.0, 0.0, 0.0, &zero), -1.5);
        let s = BsdeState::default();
        let via = driver_a_trunc(&m, 10.0, 0.0, 0.0, &s) + m.alpha_sigma * driver_y2_trunc(&m, 10.0, 0.0, 0.0, &s);
        assert_eq!(via, -1.5);
        assert_eq!(driver_g2_diag(&m, 10.0, 0.0, 0.0, &zero), 0.5);
    }

    #[test]
    fn to_diagonal_examples() {
        let s = st(1.0, 0.0, 2.0, 0.0, 0.0, 0.0);
        assert_eq!(to_diagonal(1.0, &s).y_sigma, 3.0);
        let s = st(-1.0, 0.0, 4.0, 0.0, 0.0, 0.0);
        assert_eq!(to_diagonal(0.75, &s).y_sigma, 2.0);
    }

    #[test]
    fn finite_difference_slopes_in_y() {
        let m = tanh_model();
        let (t, d) = (0.3, 0.7);
        let s = st(0.4, -0.2, 0.3, 0.1, -0.3, 0.2);
        let h = 1e-6;
        let fd = |f: &dyn Fn(&BsdeState) -> f64, bump: &dyn Fn(&mut BsdeState, f64)| {
            let (mut up, mut dn) = (s, s);
            bump(&mut up, h);
            bump(&mut dn, -h);
            (f(&up) - f(&dn)) / (2.0 * h)
        };
        let ga = |x: &BsdeState| driver_a(&m, t, d, x).unwrap();
        let g1 = |x: &BsdeState| driver_y1(&m, t, d, x).unwrap();
        let g2 = |x: &BsdeState| driver_y2(&m, t, d, x).unwrap();
        let by1 = |x: &mut BsdeState, e: f64| x.y1 += e;
        let by2 = |x: &mut BsdeState, e: f64| x.y2 += e;
        let slope = (-s.a).exp();
        assert!(fd(&ga, &by1).abs() < 1e-8);
        assert!(fd(&ga, &by2).abs() < 1e-8);
        assert!((fd(&g1, &by1) - slope).abs() < 1e-8);
        assert!(fd(&g1, &by2).abs() < 1e-8);
        assert!((fd(&g2, &by2) - slope).abs() < 1e-8);
        assert!(fd(&g2, &by1).abs() < 1e-8);
    }

    fn state_strategy() -> impl Strategy<Value = BsdeState> {
        (
            -6.0..6.0f64,
            -6.0..6.0f64,
            -6.0..6.0f64,
            -3.0..3.0f64,
            -3.0..3.0f64,
            -3.0..3.0f64,
        )
            .prop_map(|(a, y1, y2, z_a, z1, z2)| BsdeState { a, y1, y2, z_a, z1, z2 })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn clamp_is_idempotent(n in 1.0..100.0f64, x in -1e6..1e6f64) {
            prop_assert_eq!(clamp(n, clamp(n, x)), clamp(n, x));
        }

        #[test]
        fn diagonal_round_trip_is_bit_exact(alpha in 0.05..20.0f64, s in state_strategy()) {
            let (a, z_a, y2, z2) = from_diagonal(alpha, &to_diagonal(alpha, &s));
            prop_assert_eq!(a.to_bits(), s.a.to_bits());
            prop_assert_eq!(z_a.to_bits(), s.z_a.to_bits());
            prop_assert_eq!(y2.to_bits(), s.y2.to_bits());
            prop_assert_eq!(z2.to_bits(), s.z2.to_bits());
        }

        #[test]
        fn diagonal_consistency(s in state_strategy(), n in 1.0..8.0f64, t in 0.0..1.0f64, d in -4.0..4.0f64) {
            let m = tanh_model();
            let ds = to_diagonal(m.alpha_sigma, &s);
            let lhs = driver_g_sigma(&m, n, t, d, &ds);
            let rhs = driver_a_trunc(&m, n, t, d, &s) + m.alpha_sigma * driver_y2_trunc(&m, n, t, d, &s);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())), "{} vs {}", lhs, rhs);
            let g2 = driver_g2_diag(&m, n, t, d, &ds);
            prop_assert_eq!(g2, driver_y2_trunc(&m, n, t, d, &s));
        }

        #[test]
        fn truncation_inactive_on_band(s in state_strategy(), t in 0.0..1.0f64, d in -4.0..4.0f64) {
            let m = tanh_model();
            let n = 6.0;
            prop_assume!(s.a >= -n && s.y2.abs() <= n);
            prop_assert_eq!(driver_a_trunc(&m, n, t, d, &s), driver_a(&m, t, d, &s).unwrap());
            prop_assert_eq!(driver_y2_trunc(&m, n, t, d, &s), driver_y2(&m, t, d, &s).unwrap());
        }

        #[test]
        fn quadratic_growth_on_band(s in state_strategy(), t in 0.0..1.0f64, d in -4.0..4.0f64) {
            let m = tanh_model();
            let n = 6.0;
            let (c0, c1) = growth_constants(&m, n);
            let zz = s.z_a * s.z_a + s.z1 * s.z1 + s.z2 * s.z2;
            let bound = c0 + c1 * zz;
            prop_assert!(driver_a_trunc(&m, n, t, d, &s).abs() <= bound);
            prop_assert!(driver_y2_trunc(&m, n, t, d, &s).abs() <= bound);
            // y1 driver is only bounded on |y1| <= N
            let s1 = BsdeState { a: s.a.max(-n), y1: clamp(n, s.y1), ..s };
            prop_assert!(driver_y1(&m, t, d, &s1).unwrap().abs() <= bound);
        }
    }
}
