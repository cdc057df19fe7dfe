//! Reference solvers for the dual stopping problem: a CRR binomial tree in
//! `Y`, and projected SOR on the transformed variational inequality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual_primal::{grid_minimize, DualPrimalError};
use crate::loss::Obstacle;
use crate::market::{DerivedConstants, MarketError, MarketParams, Payoff, UtilityFamily};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("tree probability p = {p} outside (0, 1) for dt = {dt}")]
    InvalidProbability { p: f64, dt: f64 },
    #[error("invalid solver spec: {0}")]
    InvalidSpec(String),
    #[error("PSOR did not converge at time step {step}: {iterations} iterations, last update {last_update:e}")]
    NoConvergence { step: usize, iterations: usize, last_update: f64 },
    #[error("query {what} = {value} outside the solver grid")]
    OutOfGrid { what: &'static str, value: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    DualPrimal(#[from] DualPrimalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub steps: usize,
    pub market: MarketParams,
    pub utility: UtilityFamily,
}

impl TreeSpec {
    pub fn new(steps: usize, market: MarketParams, utility: UtilityFamily) -> Self {
        Self { steps, market, utility }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.steps == 0 {
            return Err(BenchError::InvalidSpec("tree needs at least one step".into()));
        }
        self.market.validate()?;
        self.utility.validate()?;
        Ok(())
    }
}

/// CRR lattice parameters for one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lattice {
    u: f64,
    p: f64,
    disc: f64,
}

fn lattice(market: &MarketParams, theta: f64, dt: f64) -> Result<Lattice, BenchError> {
    let u = (theta * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p = (((market.beta - market.r) * dt).exp() - d) / (u - d);
    if !(p > 0.0 && p < 1.0) {
        return Err(BenchError::InvalidProbability { p, dt });
    }
    Ok(Lattice {
        u,
        p,
        disc: (-market.beta * dt).exp(),
    })
}

/// Tree value of the dual stopping problem rooted at `Y_t = y`.
pub fn btm_dual_value(spec: &TreeSpec, t: f64, y: f64) -> Result<f64, BenchError> {
    btm_with(spec, t, y, &Payoff::new(spec.utility, spec.market.k))
}

/// As [`btm_dual_value`] with an arbitrary obstacle in `z = ln y`.
pub fn btm_with(spec: &TreeSpec, t: f64, y: f64, obstacle: &dyn Obstacle) -> Result<f64, BenchError> {
    spec.validate()?;
    let market = &spec.market;
    if !(y > 0.0) {
        return Err(BenchError::OutOfGrid { what: "y", value: y });
    }
    if !(0.0..=market.horizon).contains(&t) {
        return Err(BenchError::OutOfGrid { what: "t", value: t });
    }
    let z0 = y.ln();
    if t == market.horizon {
        return Ok(obstacle.eval(z0).0);
    }
    let n = spec.steps;
    let theta = market.derived()?.theta;
    let lat = lattice(market, theta, (market.horizon - t) / n as f64)?;
    let lnu = lat.u.ln();
    // node j at step m sits at ln y + (2j - m) ln u; tabulate the payoff by 2j - m + n
    let pay: Vec<f64> = (0..=2 * n).map(|k| obstacle.eval(z0 + (k as f64 - n as f64) * lnu).0).collect();
    let mut v: Vec<f64> = (0..=n).map(|j| pay[2 * j]).collect();
    let (pu, pd) = (lat.disc * lat.p, lat.disc * (1.0 - lat.p));
    for m in (0..n).rev() {
        let offset = n - m;
        for j in 0..=m {
            let cont = pu * v[j + 1] + pd * v[j];
            v[j] = cont.max(pay[2 * j + offset]);
        }
    }
    Ok(v[0])
}

/// Tree values on the 200-point `z` grid of `[-c, c]` at time `t`.
fn btm_grid_values(spec: &TreeSpec, t: f64, zs: &[f64]) -> Result<Vec<f64>, BenchError> {
    zs.iter().map(|&z| btm_dual_value(spec, t, z.exp())).collect()
}

/// `min_y {V~_BTM(t, y) + x y}` over the evaluation band; returns `(V, y*)`.
pub fn btm_primal_value(spec: &TreeSpec, t: f64, x: f64, c_eval: f64) -> Result<(f64, f64), BenchError> {
    Ok(btm_primal_values(spec, t, &[x], c_eval)?[0])
}

/// [`btm_primal_value`] for several wealths, sharing the tree grid.
pub fn btm_primal_values(spec: &TreeSpec, t: f64, xs: &[f64], c_eval: f64) -> Result<Vec<(f64, f64)>, BenchError> {
    let n = crate::dual_primal::GRID_POINTS;
    let h = 2.0 * c_eval / (n - 1) as f64;
    let zs: Vec<f64> = (0..n).map(|i| -c_eval + h * i as f64).collect();
    let table = btm_grid_values(spec, t, &zs)?;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        if !(x > spec.market.k) {
            return Err(DualPrimalError::WealthBelowFloor { x, k: spec.market.k }.into());
        }
        let (v, z) = grid_minimize::<_, BenchError>(
            |q| {
                if q.len() == n {
                    Ok(table.iter().zip(q).map(|(tv, &z)| tv + x * z.exp()).collect())
                } else {
                    Ok(btm_grid_values(spec, t, q)?.iter().zip(q).map(|(tv, &z)| tv + x * z.exp()).collect())
                }
            },
            c_eval,
            x,
        )?;
        out.push((v, z.exp()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsorSpec {
    pub n_tau: usize,
    pub n_z: usize,
    pub c_z: f64,
    pub omega: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PsorSpec {
    fn default() -> Self {
        Self {
            n_tau: 200,
            n_z: 400,
            c_z: 2.0,
            omega: 1.5,
            tolerance: 1e-10,
            max_iterations: 100_000,
        }
    }
}

impl PsorSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.n_tau == 0 || self.n_z < 2 {
            return Err(BenchError::InvalidSpec(format!(
                "grid {}x{} too small",
                self.n_tau, self.n_z
            )));
        }
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(BenchError::InvalidSpec(format!("omega = {} outside (0, 2)", self.omega)));
        }
        if !(self.c_z > 0.0 && self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(BenchError::InvalidSpec("c_z, tolerance and max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Grid solution `v(tau_i, z_j)`; `values[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsorSolution {
    pub taus: Vec<f64>,
    pub zs: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub upwind: bool,
    /// max over steps and interior nodes of `(G v) (v - g)`
    pub complementarity: f64,
    /// smallest discrete operator value and smallest obstacle gap seen
    pub min_operator: f64,
    pub min_gap: f64,
}

impl PsorSolution {
    /// Linear interpolation in `tau` and `z`.
    pub fn value_at(&self, tau: f64, z: f64) -> Result<f64, BenchError> {
        let (ti, tw) = bracket(&self.taus, tau).ok_or(BenchError::OutOfGrid { what: "tau", value: tau })?;
        let (zj, zw) = bracket(&self.zs, z).ok_or(BenchError::OutOfGrid { what: "z", value: z })?;
        let at = |i: usize| self.values[i][zj] * (1.0 - zw) + self.values[i][zj + 1] * zw;
        Ok(at(ti) * (1.0 - tw) + at(ti + 1) * tw)
    }

    /// `V~(t, y)` through the change of variables.
    pub fn dual_value(&self, consts: &DerivedConstants, horizon: f64, t: f64, y: f64) -> Result<f64, BenchError> {
        self.value_at(consts.tau_of(horizon, t), y.ln())
    }
}

/// Index `i` and weight `w` with `x = (1 - w) grid[i] + w grid[i + 1]`.
fn bracket(grid: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = grid.len();
    let (lo, hi) = (grid[0], grid[n - 1]);
    let slack = 1e-12 * (hi - lo);
    if !(x >= lo - slack && x <= hi + slack) || n < 2 {
        return None;
    }
    let h = (hi - lo) / (n - 1) as f64;
    let i = (((x - lo) / h).floor() as usize).min(n - 2);
    Some((i, ((x - grid[i]) / h).clamp(0.0, 1.0)))
}

pub fn psor_solve(spec: &PsorSpec, market: &MarketParams, utility: UtilityFamily) -> Result<PsorSolution, BenchError> {
    market.validate()?;
    utility.validate()?;
    psor_solve_with(spec, &market.derived()?, &Payoff::new(utility, market.k))
}

/// Implicit Euler in `tau`, central (or upwind) differences in `z`, with the
/// obstacle enforced at every time step by projected SOR.
pub fn psor_solve_with(spec: &PsorSpec, consts: &DerivedConstants, obstacle: &dyn Obstacle) -> Result<PsorSolution, BenchError> {
    spec.validate()?;
    let (nt, nz) = (spec.n_tau, spec.n_z);
    let dtau = consts.tau_max / nt as f64;
    let dz = 2.0 * spec.c_z / nz as f64;
    let taus: Vec<f64> = (0..=nt).map(|i| dtau * i as f64).collect();
    let zs: Vec<f64> = (0..=nz).map(|j| -spec.c_z + dz * j as f64).collect();
    let g: Vec<f64> = zs.iter().map(|&z| obstacle.eval(z).0).collect();

    let kappa = consts.kappa;
    let upwind = kappa.abs() * dz / 2.0 > 2.0;
    let diff = 1.0 / (dz * dz);
    let (mut lo, mut di, mut up) = (-diff, 1.0 / dtau + 2.0 * diff + consts.rho, -diff);
    if upwind {
        if kappa > 0.0 {
            lo -= kappa / dz;
            di += kappa / dz;
        } else {
            up += kappa / dz;
            di -= kappa / dz;
        }
    } else {
        lo -= kappa / (2.0 * dz);
        up += kappa / (2.0 * dz);
    }

    let mut values = Vec::with_capacity(nt + 1);
    values.push(g.clone());
    let mut iterations = Vec::with_capacity(nt);
    let mut v = g.clone();
    let (mut comp, mut min_op, mut min_gap) = (0.0f64, f64::INFINITY, f64::INFINITY);
    for step in 1..=nt {
        let rhs: Vec<f64> = v.iter().map(|x| x / dtau).collect();
        // the previous slice is the starting guess; walls stay at g
        let mut iters = 0;
        loop {
            iters += 1;
            let mut biggest = 0.0f64;
            for j in 1..nz {
                let gs = (rhs[j] - lo * v[j - 1] - up * v[j + 1]) / di;
                let new = (v[j] + spec.omega * (gs - v[j])).max(g[j]);
                biggest = biggest.max((new - v[j]).abs());
                v[j] = new;
            }
            if biggest < spec.tolerance {
                break;
            }
            if iters >= spec.max_iterations {
                return Err(BenchError::NoConvergence {
                    step,
                    iterations: iters,
                    last_update: biggest,
                });
            }
        }
        for j in 1..nz {
            let op = lo * v[j - 1] + di * v[j] + up * v[j + 1] - rhs[j];
            let gap = v[j] - g[j];
            comp = comp.max(op * gap);
            min_op = min_op.min(op);
            min_gap = min_gap.min(gap);
        }
        iterations.push(iters);
        values.push(v.clone());
    }
    Ok(PsorSolution {
        taus,
        zs,
        values,
        iterations,
        upwind,
        complementarity: comp,
        min_operator: min_op,
        min_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn power() -> UtilityFamily {
        UtilityFamily::Power { gamma: 0.5 }
    }

    #[test]
    fn heavy_discounting_stops_at_once() {
        let mut m = MarketParams::example_one();
        m.beta = 5.0;
        m.r = 4.95;
        m.mu = 5.05;
        let spec = TreeSpec::new(1, m, power());
        let pay = Payoff::new(power(), m.k);
        // only where the payoff is positive; a negative payoff is beaten by a discounted one
        for y in [0.3, 0.5, 0.7] {
            assert_relative_eq!(btm_dual_value(&spec, 0.0, y).unwrap(), pay.dual(y).unwrap(), max_relative = 1e-14);
        }
    }

    #[test]
    fn tree_dominates_payoff_and_grows_with_horizon() {
        let m = MarketParams::example_one();
        let pay = Payoff::new(power(), m.k);
        let spec = TreeSpec::new(400, m, power());
        for y in [0.4, 0.8, 1.0, 1.3, 2.5] {
            let a = btm_dual_value(&spec, 0.5, y).unwrap();
            let b = btm_dual_value(&spec, 0.0, y).unwrap();
            assert!(a >= pay.dual(y).unwrap() - 1e-14);
            assert!(b >= a - 1e-12, "y={y}: {b} < {a}");
        }
    }

    #[test]
    fn tree_self_convergence() {
        let m = MarketParams::example_one();
        // y = 1 lies in the stopping region of the power payoff, so probe above it
        let a = btm_dual_value(&TreeSpec::new(2000, m, power()), 0.0, 1.6).unwrap();
        let b = btm_dual_value(&TreeSpec::new(4000, m, power()), 0.0, 1.6).unwrap();
        assert!(((a - b) / b).abs() <= 1e-3, "{a} vs {b}");
    }

    #[test]
    fn tree_at_maturity_is_payoff() {
        let m = MarketParams::example_one();
        let spec = TreeSpec::new(10, m, UtilityFamily::NonHara);
        let pay = Payoff::new(UtilityFamily::NonHara, m.k);
        assert_eq!(btm_dual_value(&spec, m.horizon, 1.7).unwrap(), pay.dual(1.7).unwrap());
    }

    #[test]
    fn bad_probability_is_reported() {
        let mut m = MarketParams::example_one();
        m.beta = 50.0;
        m.r = 0.01;
        let spec = TreeSpec::new(1, m, power());
        assert!(matches!(btm_dual_value(&spec, 0.0, 1.0), Err(BenchError::InvalidProbability { .. })));
    }

    #[test]
    fn primal_from_closed_form_dual() {
        // obstacle 1/y with no time value: tree returns 1/y exactly when beta is huge
        let mut m = MarketParams::example_one();
        m.beta = 40.0;
        m.r = 39.99;
        m.mu = 40.04;
        let spec = TreeSpec::new(1, m, power());
        let inv = |z: f64| ((-z).exp(), -(-z).exp());
        let v = btm_with(&spec, 0.0, 0.5, &inv).unwrap();
        assert_relative_eq!(v, 2.0, max_relative = 1e-12);
        // the grid path is shared with the network surfaces
        let (vmin, z) = grid_minimize::<_, BenchError>(|zs| Ok(zs.iter().map(|&z| (-z).exp() + 4.0 * z.exp()).collect()), 1.0, 4.0).unwrap();
        assert_relative_eq!(vmin, 4.0, max_relative = 1e-6);
        assert_relative_eq!(z.exp(), 0.5, max_relative = 1e-3);
    }

    #[test]
    fn psor_zero_obstacle_is_zero() {
        let consts = MarketParams::example_one().derived().unwrap();
        let zero = |_z: f64| (0.0, 0.0);
        let spec = PsorSpec {
            n_tau: 20,
            n_z: 40,
            ..PsorSpec::default()
        };
        let sol = psor_solve_with(&spec, &consts, &zero).unwrap();
        assert!(sol.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn psor_respects_obstacle() {
        let m = MarketParams::example_one();
        let spec = PsorSpec {
            n_tau: 50,
            n_z: 100,
            ..PsorSpec::default()
        };
        let sol = psor_solve(&spec, &m, power()).unwrap();
        let pay = Payoff::new(power(), m.k);
        for row in &sol.values {
            for (v, &z) in row.iter().zip(&sol.zs) {
                assert!(*v >= pay.g(z).0 - 1e-10);
            }
        }
        assert!(!sol.upwind);
    }

    #[test]
    fn psor_invalid_spec() {
        let m = MarketParams::example_one();
        for spec in [
            PsorSpec { omega: 2.0, ..PsorSpec::default() },
            PsorSpec { n_z: 1, ..PsorSpec::default() },
            PsorSpec { tolerance: 0.0, ..PsorSpec::default() },
        ] {
            assert!(matches!(psor_solve(&spec, &m, power()), Err(BenchError::InvalidSpec(_))));
        }
    }

    #[test]
    fn psor_interpolation_hits_nodes() {
        let m = MarketParams::example_one();
        let spec = PsorSpec {
            n_tau: 10,
            n_z: 40,
            ..PsorSpec::default()
        };
        let sol = psor_solve(&spec, &m, power()).unwrap();
        assert_eq!(sol.value_at(sol.taus[10], sol.zs[7]).unwrap(), sol.values[10][7]);
        assert!(sol.value_at(0.0, 2.5).is_err());
    }
}
