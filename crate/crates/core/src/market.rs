//! Market parameters, the two utility families and their convex duals.
//!
//! Everything here is a pure scalar function; the rest of the crate consumes a
//! validated [`MarketParams`] together with a [`UtilityFamily`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("invalid market parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("{function} is undefined at {arg} = {value}")]
    Domain {
        function: &'static str,
        arg: &'static str,
        value: f64,
    },
}

/// Economic constants of the market and of the investor's problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Stock drift (1/year).
    pub mu: f64,
    /// Riskless rate (1/year).
    pub r: f64,
    /// Stock volatility (1/sqrt(year)).
    pub sigma: f64,
    /// Utility discount rate (1/year).
    pub beta: f64,
    /// Wealth threshold.
    #[serde(rename = "K")]
    pub k: f64,
    /// Investment horizon (years).
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self::example_one()
    }
}

impl MarketParams {
    /// The reference market used throughout the experiments.
    pub fn example_one() -> Self {
        Self {
            mu: 0.1,
            r: 0.05,
            sigma: 0.3,
            beta: 0.1,
            k: 1.0,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let positive = [
            ("sigma", self.sigma),
            ("r", self.r),
            ("beta", self.beta),
            ("K", self.k),
            ("T", self.horizon),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(MarketError::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        if !self.mu.is_finite() {
            return Err(MarketError::InvalidParameter {
                name: "mu",
                value: self.mu,
                reason: "must be finite",
            });
        }
        if self.mu == self.r {
            return Err(MarketError::InvalidParameter {
                name: "mu",
                value: self.mu,
                reason: "must differ from r (zero market price of risk)",
            });
        }
        Ok(())
    }

    /// Derives the constants of the transformed variational inequality.
    pub fn derived(&self) -> Result<DerivedConstants, MarketError> {
        self.validate()?;
        Ok(DerivedConstants::from_params(self))
    }
}

/// Constants of the log-dual, time-to-maturity formulation
/// `min{v_tau - v_zz + kappa v_z + rho v, v - g} = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Market price of risk `(mu - r) / sigma`.
    pub theta: f64,
    /// `2 beta / theta^2`.
    pub rho: f64,
    /// `(2r - 2beta) / theta^2 + 1`.
    pub kappa: f64,
    /// `theta^2 T / 2`, the transformed horizon.
    pub tau_max: f64,
}

impl DerivedConstants {
    fn from_params(p: &MarketParams) -> Self {
        let theta = (p.mu - p.r) / p.sigma;
        let theta2 = theta * theta;
        Self {
            theta,
            rho: 2.0 * p.beta / theta2,
            kappa: (2.0 * p.r - 2.0 * p.beta) / theta2 + 1.0,
            tau_max: theta2 * p.horizon / 2.0,
        }
    }

    /// Calendar time `t` to transformed time `tau = theta^2 (T - t) / 2`.
    pub fn tau_of(&self, horizon: f64, t: f64) -> f64 {
        self.theta * self.theta * (horizon - t) / 2.0
    }

    /// Inverse of [`Self::tau_of`].
    pub fn t_of(&self, horizon: f64, tau: f64) -> f64 {
        horizon - 2.0 * tau / (self.theta * self.theta)
    }
}

/// The two utility families supported by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityFamily {
    /// `U(x) = x^gamma / gamma`, `0 < gamma < 1`.
    Power { gamma: f64 },
    /// `U(x) = H(x)^-3 / 3 + H(x)^-1 + x H(x)` with dual `y^-3/3 + y^-1`.
    NonHara,
}

impl Default for UtilityFamily {
    fn default() -> Self {
        UtilityFamily::Power { gamma: 0.5 }
    }
}

impl UtilityFamily {
    pub fn validate(&self) -> Result<(), MarketError> {
        match *self {
            UtilityFamily::Power { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                Err(MarketError::InvalidParameter {
                    name: "gamma",
                    value: gamma,
                    reason: "power utility needs 0 < gamma < 1",
                })
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            UtilityFamily::Power { .. } => "power",
            UtilityFamily::NonHara => "non-HARA",
        }
    }
}

fn domain(function: &'static str, arg: &'static str, value: f64) -> MarketError {
    MarketError::Domain {
        function,
        arg,
        value,
    }
}

/// `H(x) = (2 / (sqrt(1 + 4x) - 1))^(1/2)`, written without the cancellation
/// at small `x`.
fn non_hara_h(x: f64) -> f64 {
    ((1.0 + (1.0 + 4.0 * x).sqrt()) / (2.0 * x)).sqrt()
}

/// Utility `U(x)` of the wealth gap `x >= 0`.
pub fn primal_utility(family: UtilityFamily, x: f64) -> Result<f64, MarketError> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(domain("U", "x", x));
    }
    Ok(match family {
        UtilityFamily::Power { gamma } => x.powf(gamma) / gamma,
        UtilityFamily::NonHara => {
            if x == 0.0 {
                // U(0) = 0 is the limit; H is singular there.
                0.0
            } else {
                let h = non_hara_h(x);
                1.0 / (3.0 * h * h * h) + 1.0 / h + x * h
            }
        }
    })
}

/// Dual utility `U~_K(y) = sup_{x > K} {U(x - K) - x y}`.
pub fn dual_utility(family: UtilityFamily, k: f64, y: f64) -> Result<f64, MarketError> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(domain("U~_K", "y", y));
    }
    Ok(match family {
        UtilityFamily::Power { gamma } => {
            (1.0 - gamma) / gamma * y.powf(gamma / (gamma - 1.0)) - k * y
        }
        UtilityFamily::NonHara => {
            let inv = 1.0 / y;
            inv * inv * inv / 3.0 + inv - k * y
        }
    })
}

/// Derivative `U~_K'(y)`.
pub fn dual_utility_prime(family: UtilityFamily, k: f64, y: f64) -> Result<f64, MarketError> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(domain("U~_K'", "y", y));
    }
    Ok(match family {
        UtilityFamily::Power { gamma } => -y.powf(1.0 / (gamma - 1.0)) - k,
        UtilityFamily::NonHara => {
            let inv2 = 1.0 / (y * y);
            -inv2 * inv2 - inv2 - k
        }
    })
}

/// Obstacle in log-dual coordinates: `g(z) = U~_K(e^z)` and `g'(z)`.
pub fn payoff_g(family: UtilityFamily, k: f64, z: f64) -> (f64, f64) {
    let y = z.exp();
    // e^z > 0 for every finite z, so the dual is always defined here.
    let g = dual_utility(family, k, y).expect("e^z is positive");
    let gp = y * dual_utility_prime(family, k, y).expect("e^z is positive");
    (g, gp)
}

/// Obstacle of a market/utility pair, bundled for the loss and solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payoff {
    pub family: UtilityFamily,
    pub k: f64,
}

impl Payoff {
    pub fn new(family: UtilityFamily, k: f64) -> Self {
        Self { family, k }
    }

    pub fn g(&self, z: f64) -> (f64, f64) {
        payoff_g(self.family, self.k, z)
    }

    pub fn dual(&self, y: f64) -> Result<f64, MarketError> {
        dual_utility(self.family, self.k, y)
    }

    pub fn dual_prime(&self, y: f64) -> Result<f64, MarketError> {
        dual_utility_prime(self.family, self.k, y)
    }

    /// Utility of terminal wealth `x`, i.e. `U(x - K)`.
    pub fn utility_of_wealth(&self, x: f64) -> Result<f64, MarketError> {
        primal_utility(self.family, x - self.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const POWER: UtilityFamily = UtilityFamily::Power { gamma: 0.5 };

    /// `sup_{x > K} {U(x - K) - x y}` by dense grid search over the gap.
    fn brute_force_dual(family: UtilityFamily, k: f64, y: f64) -> f64 {
        // The maximiser solves U'(x-K) = y; bracket it generously in log space.
        let (lo, hi) = (1e-8_f64.ln(), 1e6_f64.ln());
        let n = 200_000;
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        let eval = |i: usize| {
            let gap = (lo + (hi - lo) * i as f64 / n as f64).exp();
            primal_utility(family, gap).unwrap() - (gap + k) * y
        };
        for i in 0..=n {
            let v = eval(i);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        // golden refinement around the best grid cell
        let step = (hi - lo) / n as f64;
        let mut a = lo + step * (best_i.saturating_sub(1)) as f64;
        let mut b = lo + step * (best_i + 1).min(n) as f64;
        let f = |s: f64| primal_utility(family, s.exp()).unwrap() - (s.exp() + k) * y;
        for _ in 0..200 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if f(m1) < f(m2) {
                a = m1;
            } else {
                b = m2;
            }
        }
        f(0.5 * (a + b)).max(best)
    }

    #[test]
    fn primal_utility_examples() {
        assert_relative_eq!(primal_utility(POWER, 4.0).unwrap(), 4.0, epsilon = 1e-15);
        assert_eq!(primal_utility(POWER, 0.0).unwrap(), 0.0);
        assert_relative_eq!(
            primal_utility(UtilityFamily::NonHara, 2.0).unwrap(),
            10.0 / 3.0,
            epsilon = 1e-14
        );
        assert_eq!(primal_utility(UtilityFamily::NonHara, 0.0).unwrap(), 0.0);
        assert!(primal_utility(POWER, -0.1).is_err());
        assert!(primal_utility(UtilityFamily::NonHara, -1.0).is_err());
    }

    #[test]
    fn non_hara_h_matches_textbook_form() {
        for &x in &[0.5, 2.0, 7.0, 30.0] {
            let textbook = (2.0 / (-1.0 + (1.0f64 + 4.0 * x).sqrt())).sqrt();
            assert_relative_eq!(non_hara_h(x), textbook, max_relative = 1e-13);
        }
        assert_eq!(non_hara_h(2.0), 1.0);
    }

    #[test]
    fn primal_utility_increasing_and_concave() {
        for family in [POWER, UtilityFamily::NonHara] {
            let xs: Vec<f64> = (1..200).map(|i| i as f64 * 0.05).collect();
            let us: Vec<f64> = xs.iter().map(|&x| primal_utility(family, x).unwrap()).collect();
            for w in us.windows(3) {
                assert!(w[1] > w[0] && w[2] > w[1]);
                assert!(w[2] - w[1] < w[1] - w[0]);
            }
            // U(0) = 0 in the limit
            assert!(primal_utility(family, 1e-10).unwrap() < 1e-3);
        }
    }

    #[test]
    fn dual_utility_examples() {
        assert_relative_eq!(dual_utility(POWER, 1.0, 1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            dual_utility(UtilityFamily::NonHara, 1.0, 1.0).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(dual_utility_prime(POWER, 1.0, 1.0).unwrap(), -2.0);
        assert_relative_eq!(
            dual_utility_prime(UtilityFamily::NonHara, 1.0, 1.0).unwrap(),
            -3.0
        );
        assert!(dual_utility(POWER, 1.0, 0.0).is_err());
        assert!(dual_utility_prime(UtilityFamily::NonHara, 1.0, -2.0).is_err());
    }

    #[test]
    fn dual_examples_agree_with_brute_force() {
        assert_relative_eq!(brute_force_dual(POWER, 1.0, 1.0), 0.0, epsilon = 1e-6);
        assert_relative_eq!(
            brute_force_dual(UtilityFamily::NonHara, 1.0, 1.0),
            1.0 / 3.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn convex_duality_round_trip() {
        for family in [POWER, UtilityFamily::NonHara] {
            for i in 0..50 {
                let y = 10f64.powf(-1.0 + 2.0 * i as f64 / 49.0);
                let exact = dual_utility(family, 1.0, y).unwrap();
                let brute = brute_force_dual(family, 1.0, y);
                assert!(
                    (brute - exact).abs() <= 1e-4 * exact.abs().max(1e-12) + 1e-9,
                    "{family:?} y={y}: brute {brute} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn dual_decays_to_linear_part() {
        for family in [POWER, UtilityFamily::NonHara] {
            let mut prev = f64::INFINITY;
            for i in 0..20 {
                let y = 2f64.powi(i);
                let excess = dual_utility(family, 1.0, y).unwrap() + y;
                assert!(excess > 0.0 && excess < prev);
                prev = excess;
            }
            assert!(prev < 1e-3);
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        for family in [POWER, UtilityFamily::NonHara, UtilityFamily::Power { gamma: 0.3 }] {
            for &y in &[0.3, 1.0, 2.0, 5.0] {
                let h = 1e-6 * y;
                let fd = (dual_utility(family, 1.0, y + h).unwrap()
                    - dual_utility(family, 1.0, y - h).unwrap())
                    / (2.0 * h);
                let exact = dual_utility_prime(family, 1.0, y).unwrap();
                assert!(exact < 0.0);
                assert_relative_eq!(fd, exact, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn payoff_examples() {
        let (g, gp) = payoff_g(POWER, 1.0, 0.0);
        assert_relative_eq!(g, 0.0, epsilon = 1e-15);
        assert_relative_eq!(gp, -2.0, epsilon = 1e-15);
        let (g, gp) = payoff_g(UtilityFamily::NonHara, 1.0, 0.0);
        assert_relative_eq!(g, 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(gp, -3.0, epsilon = 1e-15);
        let (g, _) = payoff_g(POWER, 1.0, -1.0);
        let e = std::f64::consts::E;
        assert_relative_eq!(g, e - 1.0 / e, epsilon = 1e-14);
        assert_relative_eq!(g, 2.3504, epsilon = 1e-4);
    }

    #[test]
    fn bound_power_family() {
        // C = 1/gamma, p = gamma. The conjugate of C x^p decays like
        // y^{p/(p-1)}; the growth bound is checked with that exponent.
        let gamma: f64 = 0.5;
        let (c, p) = (1.0 / gamma, gamma);
        let c_tilde = c.max((c * p).powf(1.0 / (p - 1.0)) * (1.0 / p - 1.0));
        for i in 0..100 {
            let y = 0.05 + 0.2 * i as f64;
            let v = dual_utility(POWER, 1.0, y).unwrap();
            assert!(-y <= v);
            assert!(v <= c_tilde * y.powf(p / (p - 1.0)) - y + 1e-12);
        }
    }

    #[test]
    fn bound_non_hara_with_fitted_constant() {
        // Test-only constant: with p = 3/4 the exponent p/(p-1) is -3 and
        // y^-3/3 + y^-1 <= C y^-3 holds on [0.1, 10] for C = 101.
        let (c_fit, p) = (101.0, 0.75);
        for i in 0..100 {
            let y = 0.1 + 0.099 * i as f64;
            let v = dual_utility(UtilityFamily::NonHara, 1.0, y).unwrap();
            assert!(-y <= v);
            assert!(v <= c_fit * f64::powf(y, p / (p - 1.0)) - y);
        }
    }

    #[test]
    fn example_one_constants() {
        let d = MarketParams::example_one().derived().unwrap();
        assert_relative_eq!(d.theta, 1.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(d.rho, 7.2, max_relative = 1e-13);
        assert_relative_eq!(d.kappa, -2.6, max_relative = 1e-13);
        assert_relative_eq!(d.tau_max, 1.0 / 72.0, max_relative = 1e-13);
        // Recomputing reproduces stored values exactly.
        assert_eq!(d, MarketParams::example_one().derived().unwrap());
    }

    #[test]
    fn rejects_degenerate_markets() {
        let mut p = MarketParams::example_one();
        p.mu = p.r;
        assert!(p.derived().is_err());
        let mut p = MarketParams::example_one();
        p.sigma = 0.0;
        assert!(p.derived().is_err());
        assert!(UtilityFamily::Power { gamma: 1.0 }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn dual_is_strictly_convex(y1 in 0.1f64..10.0, dy in 0.01f64..5.0, lam in 0.01f64..0.99) {
            let y2 = y1 + dy;
            for family in [POWER, UtilityFamily::NonHara] {
                let mid = dual_utility(family, 1.0, lam * y1 + (1.0 - lam) * y2).unwrap();
                let chord = lam * dual_utility(family, 1.0, y1).unwrap()
                    + (1.0 - lam) * dual_utility(family, 1.0, y2).unwrap();
                proptest::prop_assert!(mid < chord);
            }
        }
    }
}
