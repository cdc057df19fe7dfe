//! Dual value surface on the evaluation band and primal recovery by
//! minimising `V~(t, y) + x y` over `y`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jetnet::{Jet2, JetField};
use crate::loss::DomainSpec;
use crate::market::{DerivedConstants, MarketError, MarketParams, Payoff, UtilityFamily};

pub const GRID_POINTS: usize = 200;
pub const BISECTION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DualPrimalError {
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Domain { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("no interior minimum for x = {x}: minimiser at band edge z = {z_edge}")]
    NoInteriorMinimum { x: f64, z_edge: f64 },
    #[error("wealth x = {x} must exceed K = {k}")]
    WealthBelowFloor { x: f64, k: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimalMethod {
    Grid,
    Bisection,
}

/// Values and `y`-derivatives of the dual function at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub v: f64,
    pub v_y: f64,
    pub v_yy: f64,
}

impl DualValue {
    /// Chain rule from `(tau, z)` jets with `z = ln y`.
    pub fn from_jet(jet: &Jet2, y: f64) -> Self {
        Self {
            v: jet.val,
            v_y: jet.d_z / y,
            v_yy: (jet.d_zz - jet.d_z) / (y * y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimalQuery {
    pub t: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimalResult {
    pub t: f64,
    pub x: f64,
    pub value: f64,
    pub y_star: f64,
    pub method: PrimalMethod,
}

/// Minimises `f` over `GRID_POINTS` uniform points of `[-c, c]`, then moves
/// to the vertex of the parabola through the best point and its neighbours.
/// `f` evaluates a slice of `z` values at once. Returns `(min value, z*)`; a
/// minimum on either end point is an error.
pub fn grid_minimize<F, E>(f: F, c: f64, x: f64) -> Result<(f64, f64), E>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E>,
    E: From<DualPrimalError>,
{
    let n = GRID_POINTS;
    let h = 2.0 * c / (n - 1) as f64;
    let zs: Vec<f64> = (0..n).map(|i| -c + h * i as f64).collect();
    let vals = f(&zs)?;
    let (best, &fb) = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid is non-empty");
    if best == 0 || best == n - 1 {
        return Err(DualPrimalError::NoInteriorMinimum { x, z_edge: zs[best] }.into());
    }
    let (fl, fr) = (vals[best - 1], vals[best + 1]);
    let curv = fl - 2.0 * fb + fr;
    if curv <= 0.0 {
        return Ok((fb, zs[best]));
    }
    let z = zs[best] + 0.5 * h * (fl - fr) / curv;
    let refined = f(&[z])?[0];
    if refined <= fb {
        Ok((refined, z))
    } else {
        Ok((fb, zs[best]))
    }
}

/// Root of `dfdz` on `[-c, c]` by bisection to `BISECTION_TOL` in `z`; the
/// derivative must change sign from negative to positive across the band.
pub fn bisect_root<F>(dfdz: F, c: f64, x: f64) -> Result<f64, DualPrimalError>
where
    F: Fn(f64) -> Result<f64, DualPrimalError>,
{
    let (mut lo, mut hi) = (-c, c);
    if dfdz(lo)? >= 0.0 {
        return Err(DualPrimalError::NoInteriorMinimum { x, z_edge: lo });
    }
    if dfdz(hi)? <= 0.0 {
        return Err(DualPrimalError::NoInteriorMinimum { x, z_edge: hi });
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if dfdz(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Result of a pointwise wealth or control query with its diagnostic flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub flagged: bool,
}

pub struct DualSurface<F> {
    pub field: F,
    pub market: MarketParams,
    pub utility: UtilityFamily,
    pub consts: DerivedConstants,
    pub domain: DomainSpec,
}

impl<F: JetField> DualSurface<F> {
    pub fn new(field: F, market: MarketParams, utility: UtilityFamily, domain: DomainSpec) -> Result<Self, DualPrimalError> {
        let consts = market.derived()?;
        Ok(Self {
            field,
            market,
            utility,
            consts,
            domain,
        })
    }

    pub fn payoff(&self) -> Payoff {
        Payoff::new(self.utility, self.market.k)
    }

    /// `[e^-C, e^C]` with `C` the evaluation half-width.
    pub fn y_band(&self) -> (f64, f64) {
        let c = self.domain.c_z_eval;
        ((-c).exp(), c.exp())
    }

    fn check_t(&self, t: f64) -> Result<(), DualPrimalError> {
        let horizon = self.market.horizon;
        if !(0.0..=horizon).contains(&t) {
            return Err(DualPrimalError::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: horizon,
            });
        }
        Ok(())
    }

    fn check_z(&self, z: f64) -> Result<(), DualPrimalError> {
        let c = self.domain.c_z_eval;
        // a little slack so that ln(e^C) round-off is not rejected
        if !(z.abs() <= c * (1.0 + 1e-12)) {
            return Err(DualPrimalError::Domain {
                what: "ln y",
                value: z,
                lo: -c,
                hi: c,
            });
        }
        Ok(())
    }

    pub fn tau_of(&self, t: f64) -> f64 {
        self.consts.tau_of(self.market.horizon, t)
    }

    pub fn jet_tz(&self, t: f64, z: f64) -> Result<Jet2, DualPrimalError> {
        self.check_t(t)?;
        self.check_z(z)?;
        Ok(self.field.jet(self.tau_of(t), z))
    }

    pub fn dual_value(&self, t: f64, y: f64) -> Result<DualValue, DualPrimalError> {
        if !(y > 0.0) {
            return Err(DualPrimalError::Domain {
                what: "y",
                value: y,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let jet = self.jet_tz(t, y.ln())?;
        Ok(DualValue::from_jet(&jet, y))
    }

    /// Dual values at many `(t, y)` points in one batched pass.
    pub fn dual_values(&self, points: &[(f64, f64)]) -> Result<Vec<DualValue>, DualPrimalError> {
        let mut tz = Vec::with_capacity(points.len());
        for &(t, y) in points {
            self.check_t(t)?;
            let z = y.ln();
            self.check_z(z)?;
            tz.push((self.tau_of(t), z));
        }
        let jets = self.field.jets(&tz);
        Ok(jets.iter().zip(points).map(|(j, &(_, y))| DualValue::from_jet(j, y)).collect())
    }

    pub fn primal_value(&self, t: f64, x: f64, method: PrimalMethod) -> Result<PrimalResult, DualPrimalError> {
        if !(x > self.market.k) {
            return Err(DualPrimalError::WealthBelowFloor { x, k: self.market.k });
        }
        self.check_t(t)?;
        let c = self.domain.c_z_eval;
        let (value, z) = match method {
            PrimalMethod::Grid => self.grid_primal(t, x, c)?,
            PrimalMethod::Bisection => {
                // d/dz (V~ + x e^z) = v_z + x e^z
                let z = bisect_root(|z| Ok(self.jet_tz(t, z)?.d_z + x * z.exp()), c, x)?;
                (self.jet_tz(t, z)?.val + x * z.exp(), z)
            }
        };
        Ok(PrimalResult {
            t,
            x,
            value,
            y_star: z.exp(),
            method,
        })
    }

    fn grid_primal(&self, t: f64, x: f64, c: f64) -> Result<(f64, f64), DualPrimalError> {
        let tau = self.tau_of(t);
        grid_minimize(
            |zs| {
                let pts: Vec<(f64, f64)> = zs.iter().map(|&z| (tau, z)).collect();
                for &z in zs {
                    self.check_z(z)?;
                }
                Ok(self.field.jets(&pts).iter().zip(zs).map(|(j, &z)| j.val + x * z.exp()).collect())
            },
            c,
            x,
        )
    }

    /// `X* = -V~_y`; flagged when the wealth floor `K` is violated.
    pub fn optimal_wealth(&self, t: f64, y: f64) -> Result<Flagged, DualPrimalError> {
        let x = -self.dual_value(t, y)?.v_y;
        Ok(Flagged {
            value: x,
            flagged: !(x > self.market.k),
        })
    }

    /// `pi* = (theta / sigma) y V~_yy`; flagged when `V~_yy < 0`.
    pub fn optimal_control(&self, t: f64, y: f64) -> Result<Flagged, DualPrimalError> {
        let d = self.dual_value(t, y)?;
        Ok(Flagged {
            value: self.consts.theta / self.market.sigma * y * d.v_yy,
            flagged: d.v_yy < 0.0,
        })
    }

    pub fn evaluate_batch(&self, queries: &[PrimalQuery], method: PrimalMethod) -> Vec<Result<PrimalResult, DualPrimalError>> {
        queries.iter().map(|q| self.primal_value(q.t, q.x, method)).collect()
    }
}
