//! The experiment grid: training seeds, the BTM comparison table, the
//! self-consistency grid and the run manifest. The CLI and the acceptance
//! suite both drive their runs through here.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchmarks::{btm_dual_value, btm_primal_values, psor_solve, BenchError, PsorSolution};
use crate::config::{ConfigError, ExperimentConfig};
use crate::consistency::{mean_std, run_both, run_check, CheckKind, ConsistencyError, ConsistencyReport, SeededReport};
use crate::dual_primal::{DualPrimalError, DualSurface, PrimalMethod};
use crate::jetnet::{Checkpoint, CheckpointError, Network};
use crate::report::{self, ReportError};
use crate::trainer::{self, TrainConfig, TrainError, CHECKPOINT_FILE};

pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint {path} does not match the config: {what}")]
    Mismatch { path: String, what: String },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    DualPrimal(#[from] DualPrimalError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl ExperimentError {
    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Train(TrainError::Config(_))
                | ExperimentError::MissingCheckpoint(_)
                | ExperimentError::Mismatch { .. }
        )
    }
}

pub type NetSurface = DualSurface<Network>;

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// SHA-256 of the compact JSON form of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

/// Everything needed to re-run a command: the resolved config, its hash, the
/// code version and the seeds actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub train_seeds: Vec<u64>,
    pub sim_seeds: Vec<u64>,
    pub timings: Vec<Timing>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(cfg),
            train_seeds: cfg.train.seeds.clone(),
            sim_seeds: cfg.sim.seeds.clone(),
            timings: Vec::new(),
            outputs: Vec::new(),
            config: cfg.clone(),
        }
    }

    pub fn time(&mut self, label: impl Into<String>, seconds: f64) {
        self.timings.push(Timing { label: label.into(), seconds });
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        report::write_json(&path, self)?;
        Ok(path)
    }
}

/// A trained network together with where it came from.
#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub seed: u64,
    pub net: Network,
    pub train_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

pub fn train_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<TrainedSeed, ExperimentError> {
    let tc = cfg.train_config(seed)?;
    let dir = out.map(|o| seed_dir(o, seed));
    let (net, record) = trainer::train(&tc, dir.as_deref())?;
    if let Some(d) = &dir {
        report::write_json(&d.join(TRAIN_CONFIG_FILE), &tc)?;
    }
    Ok(TrainedSeed {
        seed,
        net,
        train_seconds: record.seconds,
        checkpoint: dir.map(|d| d.join(CHECKPOINT_FILE)),
    })
}

/// Loads a checkpoint and checks that it was trained on the config's problem.
pub fn load_seed(cfg: &ExperimentConfig, path: &Path) -> Result<TrainedSeed, ExperimentError> {
    if !path.is_file() {
        return Err(ExperimentError::MissingCheckpoint(path.display().to_string()));
    }
    let ck = Checkpoint::load(path)?;
    let mismatch = |what: &str| ExperimentError::Mismatch {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    if ck.market.is_some_and(|m| m != cfg.market) {
        return Err(mismatch("market parameters"));
    }
    if ck.utility.is_some_and(|u| u != cfg.utility) {
        return Err(mismatch("utility family"));
    }
    if ck.loss_kind != cfg.loss_kind {
        return Err(mismatch("loss kind"));
    }
    if ck.domain.is_some_and(|d| d != cfg.domain_spec().unwrap_or(d)) {
        return Err(mismatch("domain"));
    }
    Ok(TrainedSeed {
        seed: ck.rng_seed,
        net: ck.to_network()?,
        train_seconds: ck.train_seconds.unwrap_or(f64::NAN),
        checkpoint: Some(path.to_path_buf()),
    })
}

/// Reuses `dir/seed_N/checkpoint.json` when it was written by an identical
/// training config, otherwise trains and writes it. Training is
/// deterministic, so the cached network equals a fresh one.
pub fn load_or_train(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TrainedSeed, ExperimentError> {
    let tc = cfg.train_config(seed)?;
    let sd = seed_dir(dir, seed);
    let ck = sd.join(CHECKPOINT_FILE);
    if let Ok(text) = fs::read_to_string(sd.join(TRAIN_CONFIG_FILE)) {
        if serde_json::from_str::<TrainConfig>(&text).is_ok_and(|old| old == tc) && ck.is_file() {
            return load_seed(cfg, &ck);
        }
    }
    train_seed(cfg, seed, Some(dir))
}

pub fn surface(cfg: &ExperimentConfig, net: Network) -> Result<NetSurface, ExperimentError> {
    Ok(DualSurface::new(net, cfg.market, cfg.utility, cfg.domain_spec()?)?)
}

/// The tree column of the comparison table: `(V_BTM, y*)` per `x0` at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BtmColumn {
    pub values: Vec<(f64, f64)>,
    pub seconds: f64,
}

pub fn btm_column(cfg: &ExperimentConfig) -> Result<BtmColumn, ExperimentError> {
    let started = Instant::now();
    let values = btm_primal_values(&cfg.tree_spec(), 0.0, &cfg.x0, cfg.domain.c_z_eval)?;
    Ok(BtmColumn {
        values,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub train_seed: u64,
    pub t: f64,
    pub x0: f64,
    pub v_net: f64,
    pub y_star_net: f64,
    pub v_btm: f64,
    pub y_star_btm: f64,
    pub rel_diff_pct: f64,
    /// Empty when the network value was found; otherwise the failure.
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedCompare {
    pub seed: u64,
    pub rows: Vec<CompareRow>,
    pub failed_points: usize,
    pub mean_abs_rel_diff_pct: f64,
    pub std_rel_diff_pct: f64,
    pub train_seconds: f64,
    pub online_ms_per_pair: f64,
}

pub fn compare_seed(cfg: &ExperimentConfig, seed: u64, surface: &NetSurface, btm: &BtmColumn, train_seconds: f64) -> SeedCompare {
    let queries: Vec<_> = cfg.x0.iter().map(|&x| crate::dual_primal::PrimalQuery { t: 0.0, x }).collect();
    let started = Instant::now();
    let results = surface.evaluate_batch(&queries, PrimalMethod::Grid);
    let online_ms_per_pair = 1e3 * started.elapsed().as_secs_f64() / queries.len() as f64;
    let mut rows = Vec::with_capacity(queries.len());
    let mut rels = Vec::new();
    let mut abs_rels = Vec::new();
    for ((q, res), &(v_btm, y_btm)) in queries.iter().zip(results).zip(&btm.values) {
        let row = match res {
            Ok(r) => {
                let rel = 100.0 * (r.value - v_btm) / v_btm;
                rels.push(rel);
                abs_rels.push(rel.abs());
                CompareRow {
                    train_seed: seed,
                    t: q.t,
                    x0: q.x,
                    v_net: r.value,
                    y_star_net: r.y_star,
                    v_btm,
                    y_star_btm: y_btm,
                    rel_diff_pct: rel,
                    error: String::new(),
                }
            }
            Err(e) => CompareRow {
                train_seed: seed,
                t: q.t,
                x0: q.x,
                v_net: f64::NAN,
                y_star_net: f64::NAN,
                v_btm,
                y_star_btm: y_btm,
                rel_diff_pct: f64::NAN,
                error: e.to_string(),
            },
        };
        rows.push(row);
    }
    SeedCompare {
        seed,
        failed_points: rows.len() - rels.len(),
        rows,
        mean_abs_rel_diff_pct: mean_std(&abs_rels).0,
        std_rel_diff_pct: mean_std(&rels).1,
        train_seconds,
        online_ms_per_pair,
    }
}

/// One line of the comparison table: per-seed statistics across `x0`, then
/// mean and sample std across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub utility: String,
    pub method: String,
    pub seeds: usize,
    pub failed_points: usize,
    pub mean_abs_rel_diff_pct: f64,
    pub mean_abs_rel_diff_pct_sd: f64,
    pub std_rel_diff_pct: f64,
    pub std_rel_diff_pct_sd: f64,
    pub offline_train_s: f64,
    pub offline_train_s_sd: f64,
    pub online_per_pair_ms: f64,
    pub online_per_pair_ms_sd: f64,
}

pub fn table1_row(cfg: &ExperimentConfig, seeds: &[SeedCompare]) -> Table1Row {
    let col = |f: fn(&SeedCompare) -> f64| mean_std(&seeds.iter().map(f).collect::<Vec<_>>());
    let (m, m_sd) = col(|s| s.mean_abs_rel_diff_pct);
    let (s, s_sd) = col(|s| s.std_rel_diff_pct);
    let (tr, tr_sd) = col(|s| s.train_seconds);
    let (on, on_sd) = col(|s| s.online_ms_per_pair);
    Table1Row {
        utility: cfg.utility.label().to_string(),
        method: cfg.loss_kind.label().to_string(),
        seeds: seeds.len(),
        failed_points: seeds.iter().map(|s| s.failed_points).sum(),
        mean_abs_rel_diff_pct: m,
        mean_abs_rel_diff_pct_sd: m_sd,
        std_rel_diff_pct: s,
        std_rel_diff_pct_sd: s_sd,
        offline_train_s: tr,
        offline_train_s_sd: tr_sd,
        online_per_pair_ms: on,
        online_per_pair_ms_sd: on_sd,
    }
}

/// Flat CSV form of one consistency cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub train_seed: u64,
    pub kind: CheckKind,
    pub x0: f64,
    pub sim_seed: u64,
    pub v0: f64,
    pub y0: f64,
    pub r_bar: f64,
    pub s_r: f64,
    pub mean_p_rel_diff: f64,
    pub paths_total: usize,
    pub paths_included: usize,
    pub excluded_floor: usize,
    pub excluded_nonfinite: usize,
    pub band_exit_paths: usize,
    pub band_exit_steps: usize,
    pub convexity_flags: usize,
    pub seconds: f64,
}

impl From<&SeededReport> for CellRow {
    fn from(s: &SeededReport) -> Self {
        let r = &s.report;
        Self {
            train_seed: s.train_seed,
            kind: r.kind,
            x0: r.x0,
            sim_seed: r.sim_seed,
            v0: r.v0,
            y0: r.y0,
            r_bar: r.r_bar,
            s_r: r.s_r,
            mean_p_rel_diff: r.mean_p_rel_diff,
            paths_total: r.paths_total,
            paths_included: r.paths_included,
            excluded_floor: r.excluded_floor,
            excluded_nonfinite: r.excluded_nonfinite,
            band_exit_paths: r.band_exit_paths,
            band_exit_steps: r.band_exit_steps,
            convexity_flags: r.convexity_flags,
            seconds: r.seconds,
        }
    }
}

/// Runs the requested checks over every `x0` and simulation seed. When both
/// checks are requested they share one simulation per cell.
pub fn consistency_seed(
    cfg: &ExperimentConfig,
    train_seed: u64,
    surface: &NetSurface,
    kinds: &[CheckKind],
) -> Result<Vec<SeededReport>, ExperimentError> {
    let both = kinds.contains(&CheckKind::Wealth) && kinds.contains(&CheckKind::Control);
    let mut out = Vec::new();
    for &x0 in &cfg.x0 {
        for &sim_seed in &cfg.sim.seeds {
            let sc = cfg.sim_config(x0, sim_seed);
            let reports: Vec<ConsistencyReport> = if both {
                let (w, c) = run_both(surface, &sc)?;
                vec![w, c]
            } else {
                kinds.iter().map(|&k| run_check(surface, &sc, k)).collect::<Result<_, _>>()?
            };
            out.extend(reports.into_iter().map(|report| SeededReport { train_seed, report }));
        }
    }
    Ok(out)
}

/// Reference dual values at a `(t, y)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub method: String,
    pub t: f64,
    pub y: f64,
    pub value: f64,
    pub payoff: f64,
    pub seconds: f64,
}

pub fn btm_oracle(cfg: &ExperimentConfig, ts: &[f64], ys: &[f64]) -> Result<Vec<OracleRow>, ExperimentError> {
    let spec = cfg.tree_spec();
    let pay = crate::market::Payoff::new(cfg.utility, cfg.market.k);
    let mut rows = Vec::new();
    for &t in ts {
        for &y in ys {
            let started = Instant::now();
            let value = btm_dual_value(&spec, t, y)?;
            rows.push(OracleRow {
                method: "btm".into(),
                t,
                y,
                value,
                payoff: pay.dual(y).map_err(BenchError::from)?,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn psor_oracle(cfg: &ExperimentConfig, ts: &[f64], ys: &[f64]) -> Result<(PsorSolution, Vec<OracleRow>), ExperimentError> {
    let started = Instant::now();
    let sol = psor_solve(&cfg.psor, &cfg.market, cfg.utility)?;
    let seconds = started.elapsed().as_secs_f64();
    let consts = cfg.market.derived().map_err(BenchError::from)?;
    let pay = crate::market::Payoff::new(cfg.utility, cfg.market.k);
    let mut rows = Vec::new();
    for &t in ts {
        for &y in ys {
            rows.push(OracleRow {
                method: "psor".into(),
                t,
                y,
                value: sol.dual_value(&consts, cfg.market.horizon, t, y)?,
                payoff: pay.dual(y).map_err(BenchError::from)?,
                seconds,
            });
        }
    }
    Ok((sol, rows))
}

/// PSOR convergence diagnostics for the oracle output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsorDiagnostics {
    pub n_tau: usize,
    pub n_z: usize,
    pub max_iterations_used: usize,
    pub upwind: bool,
    pub complementarity: f64,
    pub min_operator: f64,
    pub min_gap: f64,
}

impl From<(&ExperimentConfig, &PsorSolution)> for PsorDiagnostics {
    fn from((cfg, sol): (&ExperimentConfig, &PsorSolution)) -> Self {
        Self {
            n_tau: cfg.psor.n_tau,
            n_z: cfg.psor.n_z,
            max_iterations_used: sol.iterations.iter().copied().max().unwrap_or(0),
            upwind: sol.upwind,
            complementarity: sol.complementarity,
            min_operator: sol.min_operator,
            min_gap: sol.min_gap,
        }
    }
}
