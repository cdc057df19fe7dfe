//! Monte-Carlo self-consistency checks of a trained dual surface: simulate
//! the dual process, stop on the surface's stopping rule, and compare the
//! discounted utility of the stopped wealth with the primal value.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual_primal::{DualPrimalError, DualSurface, PrimalMethod};
use crate::jetnet::JetField;
use crate::market::MarketError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsistencyError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("no report for training seed {train_seed}, simulation seed {sim_seed}, x0 = {x0}")]
    MissingCell { train_seed: u64, sim_seed: u64, x0: f64 },
    #[error("duplicate report for training seed {train_seed}, simulation seed {sim_seed}, x0 = {x0}")]
    DuplicateCell { train_seed: u64, sim_seed: u64, x0: f64 },
    #[error("no reports to aggregate")]
    Empty,
    #[error(transparent)]
    Surface(#[from] DualPrimalError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Wealth,
    Control,
}

impl CheckKind {
    pub fn label(&self) -> &'static str {
        match self {
            CheckKind::Wealth => "wealth",
            CheckKind::Control => "control",
        }
    }
}

/// When the control acting over `(t_{n-1}, t_n]` is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlTiming {
    /// `pi` at `(t_n, Y_n)` drives the step ending at `t_n`; no update on the stopping step.
    #[default]
    EndOfStep,
    /// `pi` at `(t_{n-1}, Y_{n-1})`, updated on every step up to and including the stop.
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub x0: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub control_timing: ControlTiming,
}

impl SimConfig {
    pub fn new(x0: f64, dt: f64, paths: usize, seed: u64) -> Self {
        Self {
            x0,
            dt,
            paths,
            seed,
            control_timing: ControlTiming::default(),
        }
    }

    /// Number of time steps `N = T / dt`.
    pub fn steps(&self, horizon: f64) -> Result<usize, ConsistencyError> {
        if !(self.dt > 0.0 && self.dt <= horizon) {
            return Err(ConsistencyError::Config(format!("dt = {} must lie in (0, T]", self.dt)));
        }
        let n = (horizon / self.dt).round();
        if ((n * self.dt - horizon) / horizon).abs() > 1e-9 {
            return Err(ConsistencyError::Config(format!(
                "dt = {} does not divide T = {horizon}",
                self.dt
            )));
        }
        if self.paths == 0 {
            return Err(ConsistencyError::Config("need at least one path".into()));
        }
        Ok(n as usize)
    }
}

/// Path `i` draws its normals from ChaCha stream `i` of the base seed, so
/// results do not depend on how paths are scheduled.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// One stopped dual path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPath {
    pub ys: Vec<f64>,
    pub normals: Vec<f64>,
    pub n_star: usize,
    pub band_exit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub path: usize,
    pub n_star: usize,
    pub tau_star: f64,
    pub y_stop: f64,
    pub x_stop: f64,
    pub p: f64,
    pub r: f64,
    pub included: bool,
    pub band_exit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub kind: CheckKind,
    pub x0: f64,
    pub sim_seed: u64,
    pub v0: f64,
    pub y0: f64,
    pub r_bar: f64,
    pub s_r: f64,
    /// Extension: `(mean P - V0) / V0`, averaging utilities before comparing.
    pub mean_p_rel_diff: f64,
    pub paths_total: usize,
    pub paths_included: usize,
    pub excluded_floor: usize,
    pub excluded_nonfinite: usize,
    pub band_exit_paths: usize,
    pub band_exit_steps: usize,
    pub convexity_flags: usize,
    pub seconds: f64,
    #[serde(skip)]
    pub paths: Vec<PathResult>,
}

/// `(mean, sample std)`; the std of fewer than two values is reported as 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn clamp_band(y: f64, lo: f64, hi: f64) -> (f64, bool) {
    if y < lo {
        (lo, true)
    } else if y > hi {
        (hi, true)
    } else {
        (y, false)
    }
}

/// Single-path reference simulation of the dual process with the stopping rule.
pub fn simulate_dual_path<F: JetField>(
    surface: &DualSurface<F>,
    config: &SimConfig,
    y0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DualPath, ConsistencyError> {
    let horizon = surface.market.horizon;
    let n_steps = config.steps(horizon)?;
    let (drift, vol) = log_increment(surface, config.dt);
    let (lo, hi) = surface.y_band();
    let payoff = surface.payoff();
    let mut ys = vec![y0];
    let mut normals = Vec::new();
    let mut band_exit = false;
    let mut y = y0;
    for n in 1..=n_steps {
        let z: f64 = StandardNormal.sample(rng);
        y *= (drift - vol * z).exp();
        ys.push(y);
        normals.push(z);
        let (yc, out) = clamp_band(y, lo, hi);
        band_exit |= out;
        let t = (n as f64 * config.dt).min(horizon);
        let v = surface.dual_value(t, yc)?.v;
        if v <= payoff.dual(yc)? || n == n_steps {
            return Ok(DualPath {
                ys,
                normals,
                n_star: n,
                band_exit,
            });
        }
    }
    unreachable!("the last step always stops")
}

fn log_increment<F>(surface: &DualSurface<F>, dt: f64) -> (f64, f64) {
    let m = &surface.market;
    let theta = surface.consts.theta;
    ((m.beta - m.r - 0.5 * theta * theta) * dt, theta * dt.sqrt())
}

struct PathState {
    y: f64,
    /// wealth for the control check
    x: f64,
    /// control at the previous grid time, for adapted timing
    pi_prev: f64,
    alive: bool,
    nonfinite: bool,
    band_exit: bool,
    n_star: usize,
    y_stop: f64,
    x_wealth: f64,
    x_control: f64,
    rng: ChaCha8Rng,
}

/// Outcome of the shared simulation behind both checks.
struct Simulation {
    v0: f64,
    y0: f64,
    states: Vec<PathState>,
    band_exit_steps: usize,
    convexity_flags: usize,
}

fn simulate<F: JetField>(surface: &DualSurface<F>, config: &SimConfig) -> Result<Simulation, ConsistencyError> {
    let market = surface.market;
    config.steps(market.horizon)?;
    if !(config.x0 > market.k) {
        return Err(ConsistencyError::Config(format!("x0 = {} must exceed K = {}", config.x0, market.k)));
    }
    let start = surface.primal_value(0.0, config.x0, PrimalMethod::Grid)?;
    simulate_from(surface, config, start.value, start.y_star)
}

/// [`simulate`] from a given primal value and initial dual state.
fn simulate_from<F: JetField>(surface: &DualSurface<F>, config: &SimConfig, v0: f64, y0: f64) -> Result<Simulation, ConsistencyError> {
    let market = surface.market;
    let horizon = market.horizon;
    let n_steps = config.steps(horizon)?;
    let (drift, vol) = log_increment(surface, config.dt);
    let (lo, hi) = surface.y_band();
    let payoff = surface.payoff();
    let (theta, sigma, r, k) = (surface.consts.theta, market.sigma, market.r, market.k);
    let pi0 = surface.optimal_control(0.0, y0)?.value;
    let mut states: Vec<PathState> = (0..config.paths)
        .map(|i| PathState {
            y: y0,
            x: config.x0,
            pi_prev: pi0,
            alive: true,
            nonfinite: false,
            band_exit: false,
            n_star: 0,
            y_stop: f64::NAN,
            x_wealth: f64::NAN,
            x_control: f64::NAN,
            rng: path_rng(config.seed, i),
        })
        .collect();
    let (mut band_exit_steps, mut convexity_flags) = (0, 0);
    let sqdt = config.dt.sqrt();
    // log-gap wealth step; None when it leaves the floats
    let wealth_step = |x: f64, pi: f64, z: f64| -> Option<f64> {
        let gap = x - k;
        let lx = gap.ln() + (r * x * config.dt + sigma * pi * (theta * config.dt + z * sqdt)) / gap
            - sigma * sigma * pi * pi * config.dt / (2.0 * gap * gap);
        let next = k + lx.exp();
        (lx.is_finite() && next.is_finite()).then_some(next)
    };

    for n in 1..=n_steps {
        let t = (n as f64 * config.dt).min(horizon);
        let mut idx = Vec::new();
        let mut normals = Vec::new();
        let mut query = Vec::new();
        for (i, s) in states.iter_mut().enumerate() {
            if !s.alive {
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut s.rng);
            s.y *= (drift - vol * z).exp();
            let (yc, out) = clamp_band(s.y, lo, hi);
            if out {
                s.band_exit = true;
                band_exit_steps += 1;
            }
            idx.push(i);
            normals.push(z);
            query.push((t, yc));
        }
        let duals = surface.dual_values(&query)?;
        for ((&i, &z), (d, &(_, yc))) in idx.iter().zip(&normals).zip(duals.iter().zip(&query)) {
            let s = &mut states[i];
            let stop = d.v <= payoff.dual(yc)? || n == n_steps;
            let pi = theta / sigma * yc * d.v_yy;
            if d.v_yy < 0.0 {
                convexity_flags += 1;
            }
            match config.control_timing {
                ControlTiming::EndOfStep if !stop && !s.nonfinite => match wealth_step(s.x, pi, z) {
                    Some(x) => s.x = x,
                    None => s.nonfinite = true,
                },
                ControlTiming::Adapted if !s.nonfinite => match wealth_step(s.x, s.pi_prev, z) {
                    Some(x) => s.x = x,
                    None => s.nonfinite = true,
                },
                _ => {}
            }
            s.pi_prev = pi;
            if stop {
                s.alive = false;
                s.n_star = n;
                s.y_stop = s.y;
                s.x_wealth = -d.v_y;
                s.x_control = s.x;
            }
        }
    }
    Ok(Simulation {
        v0,
        y0,
        states,
        band_exit_steps,
        convexity_flags,
    })
}

fn report_from(
    sim: &Simulation,
    kind: CheckKind,
    surface_beta: f64,
    payoff: &crate::market::Payoff,
    config: &SimConfig,
    seconds: f64,
) -> Result<ConsistencyReport, ConsistencyError> {
    let v0 = sim.v0;
    let (mut excluded_floor, mut excluded_nonfinite) = (0, 0);
    let mut paths = Vec::with_capacity(sim.states.len());
    for (i, s) in sim.states.iter().enumerate() {
        let tau_star = s.n_star as f64 * config.dt;
        let x = match kind {
            CheckKind::Wealth => s.x_wealth,
            CheckKind::Control => s.x_control,
        };
        let mut included = true;
        if kind == CheckKind::Control && s.nonfinite {
            excluded_nonfinite += 1;
            included = false;
        } else if !(x > payoff.k) {
            excluded_floor += 1;
            included = false;
        }
        let (p, r) = if included {
            let p = (-surface_beta * tau_star).exp() * payoff.utility_of_wealth(x)?;
            (p, (p - v0) / v0)
        } else {
            (f64::NAN, f64::NAN)
        };
        paths.push(PathResult {
            path: i,
            n_star: s.n_star,
            tau_star,
            y_stop: s.y_stop,
            x_stop: x,
            p,
            r,
            included,
            band_exit: s.band_exit,
        });
    }
    let rs: Vec<f64> = paths.iter().filter(|p| p.included).map(|p| p.r).collect();
    let ps: Vec<f64> = paths.iter().filter(|p| p.included).map(|p| p.p).collect();
    let (r_bar, s_r) = mean_std(&rs);
    let mean_p = mean_std(&ps).0;
    Ok(ConsistencyReport {
        kind,
        x0: config.x0,
        sim_seed: config.seed,
        v0,
        y0: sim.y0,
        r_bar,
        s_r,
        mean_p_rel_diff: (mean_p - v0) / v0,
        paths_total: paths.len(),
        paths_included: rs.len(),
        excluded_floor,
        excluded_nonfinite,
        band_exit_paths: paths.iter().filter(|p| p.band_exit).count(),
        band_exit_steps: sim.band_exit_steps,
        convexity_flags: if kind == CheckKind::Control { sim.convexity_flags } else { 0 },
        seconds,
        paths,
    })
}

/// Stopped wealth read off the surface as `-V~_y`.
pub fn check_wealth<F: JetField>(surface: &DualSurface<F>, config: &SimConfig) -> Result<ConsistencyReport, ConsistencyError> {
    run_check(surface, config, CheckKind::Wealth)
}

/// Stopped wealth evolved forward under `pi* = (theta / sigma) y V~_yy`.
pub fn check_control<F: JetField>(surface: &DualSurface<F>, config: &SimConfig) -> Result<ConsistencyReport, ConsistencyError> {
    run_check(surface, config, CheckKind::Control)
}

pub fn run_check<F: JetField>(
    surface: &DualSurface<F>,
    config: &SimConfig,
    kind: CheckKind,
) -> Result<ConsistencyReport, ConsistencyError> {
    let started = Instant::now();
    let sim = simulate(surface, config)?;
    let seconds = started.elapsed().as_secs_f64();
    report_from(&sim, kind, surface.market.beta, &surface.payoff(), config, seconds)
}

/// Both checks from one shared simulation.
pub fn run_both<F: JetField>(
    surface: &DualSurface<F>,
    config: &SimConfig,
) -> Result<(ConsistencyReport, ConsistencyReport), ConsistencyError> {
    let started = Instant::now();
    let sim = simulate(surface, config)?;
    let seconds = started.elapsed().as_secs_f64();
    let pay = surface.payoff();
    Ok((
        report_from(&sim, CheckKind::Wealth, surface.market.beta, &pay, config, seconds)?,
        report_from(&sim, CheckKind::Control, surface.market.beta, &pay, config, seconds)?,
    ))
}

/// A consistency report tagged with the training seed of its surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededReport {
    pub train_seed: u64,
    pub report: ConsistencyReport,
}

/// Summary row in the layout of the self-consistency tables; percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub utility: String,
    pub method: String,
    pub check: CheckKind,
    pub mean_abs_rel_diff_pct: f64,
    pub mean_abs_rel_diff_pct_sd: f64,
    pub std_rel_diff_pct: f64,
    pub std_rel_diff_pct_sd: f64,
    pub avg_time_s: f64,
    pub avg_time_s_sd: f64,
}

/// Per-`x0` series for plotting, averaged over simulation and training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub x0: f64,
    pub r_bar: f64,
    pub s_r: f64,
    pub mean_abs_r_bar: f64,
}

/// Averages `|r_bar|`, `s_r` and time over each training seed's grid of
/// simulation seeds and `x0`, then reports mean and 1-sigma across training seeds.
pub fn aggregate_over_seeds(
    reports: &[SeededReport],
    utility: &str,
    method: &str,
) -> Result<SummaryRow, ConsistencyError> {
    let first = reports.first().ok_or(ConsistencyError::Empty)?;
    let key = |r: &ConsistencyReport| (r.sim_seed, r.x0.to_bits());
    let mut by_seed: BTreeMap<u64, BTreeMap<(u64, u64), &ConsistencyReport>> = BTreeMap::new();
    for sr in reports {
        let cells = by_seed.entry(sr.train_seed).or_default();
        if cells.insert(key(&sr.report), &sr.report).is_some() {
            return Err(ConsistencyError::DuplicateCell {
                train_seed: sr.train_seed,
                sim_seed: sr.report.sim_seed,
                x0: sr.report.x0,
            });
        }
    }
    let all_cells: BTreeSet<(u64, u64)> = by_seed.values().flat_map(|c| c.keys().copied()).collect();
    let (mut abs_r, mut sd_r, mut time) = (Vec::new(), Vec::new(), Vec::new());
    for (&train_seed, cells) in &by_seed {
        if let Some(&(sim_seed, x0)) = all_cells.iter().find(|c| !cells.contains_key(c)) {
            return Err(ConsistencyError::MissingCell {
                train_seed,
                sim_seed,
                x0: f64::from_bits(x0),
            });
        }
        let n = cells.len() as f64;
        abs_r.push(cells.values().map(|r| r.r_bar.abs()).sum::<f64>() / n * 100.0);
        sd_r.push(cells.values().map(|r| r.s_r).sum::<f64>() / n * 100.0);
        time.push(cells.values().map(|r| r.seconds).sum::<f64>() / n);
    }
    let (a, a_sd) = mean_std(&abs_r);
    let (s, s_sd) = mean_std(&sd_r);
    let (t, t_sd) = mean_std(&time);
    Ok(SummaryRow {
        utility: utility.to_string(),
        method: method.to_string(),
        check: first.report.kind,
        mean_abs_rel_diff_pct: a,
        mean_abs_rel_diff_pct_sd: a_sd,
        std_rel_diff_pct: s,
        std_rel_diff_pct_sd: s_sd,
        avg_time_s: t,
        avg_time_s_sd: t_sd,
    })
}

pub fn plot_series(reports: &[SeededReport]) -> Vec<PlotRow> {
    let mut by_x: BTreeMap<u64, Vec<&ConsistencyReport>> = BTreeMap::new();
    for sr in reports {
        // x0 > K > 0, so the bit pattern orders like the value
        by_x.entry(sr.report.x0.to_bits()).or_default().push(&sr.report);
    }
    by_x.into_iter()
        .map(|(bits, rs)| {
            let n = rs.len() as f64;
            PlotRow {
                x0: f64::from_bits(bits),
                r_bar: rs.iter().map(|r| r.r_bar).sum::<f64>() / n,
                s_r: rs.iter().map(|r| r.s_r).sum::<f64>() / n,
                mean_abs_r_bar: rs.iter().map(|r| r.r_bar.abs()).sum::<f64>() / n,
            }
        })
        .collect()
}
