use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualstop::config::{ExperimentConfig, Profile};
use dualstop::consistency::{aggregate_over_seeds, plot_series, CheckKind, SeededReport};
use dualstop::dual_primal::{PrimalMethod, PrimalQuery};
use dualstop::experiment::{self as exp, CellRow, ExperimentError, Manifest, PsorDiagnostics, TrainedSeed};
use dualstop::report::{self, text_table};
use dualstop::trainer::CHECKPOINT_FILE;

/// Deep Galerkin solver for optimal stopping with portfolio control.
#[derive(Debug, Parser)]
#[command(name = "dualstop", version)]
struct Cli {
    /// JSON config; missing keys fall back to the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict to one training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CheckArg {
    Wealth,
    Control,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleArg {
    Btm,
    Psor,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one network per seed; writes checkpoints and training logs.
    Train,
    /// Compare network primal values with the binomial tree at t = 0.
    Compare {
        /// Checkpoints to compare; defaults to `<out>/seed_N/checkpoint.json`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Monte-Carlo self-consistency checks over the x0 and seed grid.
    Consistency {
        #[arg(long, value_enum, default_value_t = CheckArg::Both)]
        kind: CheckArg,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Reference dual values from the tree or the PSOR solver.
    Oracle {
        #[arg(long, value_enum)]
        kind: OracleArg,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5])]
        t: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 1.0, 1.6])]
        y: Vec<f64>,
    },
    /// Primal value, optimal wealth and control from a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0])]
        t: Vec<f64>,
        /// Wealth levels; defaults to the config's x0 list.
        #[arg(long, value_delimiter = ',')]
        x: Vec<f64>,
        #[arg(long, value_enum, default_value_t = MethodArg::Grid)]
        method: MethodArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Grid,
    Bisection,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_validation));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("train.seeds=[{s}]"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", serde_json::Value::String(o.display().to_string())));
    }
    Ok(ExperimentConfig::load(cli.config.as_deref(), profile, &overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Compare { checkpoint } => cmd_compare(&cfg, &out, checkpoint),
        Command::Consistency { kind, checkpoint } => cmd_consistency(&cfg, &out, *kind, checkpoint),
        Command::Oracle { kind, t, y } => cmd_oracle(&cfg, &out, *kind, t, y),
        Command::Evaluate { checkpoint, t, x, method } => cmd_evaluate(&cfg, &out, checkpoint, t, x, *method),
    }
}

fn finish(mut manifest: Manifest, out: &Path, outputs: &[PathBuf]) -> Result<()> {
    for p in outputs {
        manifest.output(p);
    }
    let path = manifest.write(out)?;
    for p in outputs {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut manifest = Manifest::new("train", cfg);
    let mut outputs = Vec::new();
    for &seed in &cfg.train.seeds {
        let t = exp::train_seed(cfg, seed, Some(out)).map_err(ExperimentError::from)?;
        println!("seed {seed}: trained in {:.1}s", t.train_seconds);
        manifest.time(format!("train seed {seed}"), t.train_seconds);
        outputs.extend(t.checkpoint);
    }
    finish(manifest, out, &outputs)
}

/// Explicit checkpoints, or the default per-seed locations under `out`.
fn surfaces(cfg: &ExperimentConfig, out: &Path, explicit: &[PathBuf]) -> Result<Vec<TrainedSeed>, ExperimentError> {
    let paths: Vec<PathBuf> = if explicit.is_empty() {
        cfg.train.seeds.iter().map(|&s| exp::seed_dir(out, s).join(CHECKPOINT_FILE)).collect()
    } else {
        explicit.to_vec()
    };
    paths.iter().map(|p| exp::load_seed(cfg, p)).collect()
}

fn fmt(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

fn cmd_compare(cfg: &ExperimentConfig, out: &Path, checkpoints: &[PathBuf]) -> Result<()> {
    let mut manifest = Manifest::new("compare", cfg);
    let trained = surfaces(cfg, out, checkpoints)?;
    let btm = exp::btm_column(cfg)?;
    manifest.time("btm column", btm.seconds);
    let mut per_seed = Vec::new();
    for t in trained {
        let s = exp::surface(cfg, t.net)?;
        per_seed.push(exp::compare_seed(cfg, t.seed, &s, &btm, t.train_seconds));
    }
    let row = exp::table1_row(cfg, &per_seed);
    let points: Vec<_> = per_seed.iter().flat_map(|s| s.rows.clone()).collect();
    let points_path = out.join("compare_points.csv");
    let table_path = out.join("compare_table.csv");
    report::write_csv(&points_path, &points)?;
    report::write_csv(&table_path, std::slice::from_ref(&row))?;
    let pm = |m: f64, s: f64, d: usize| format!("{} ± {}", fmt(m, d), fmt(s, d));
    println!(
        "{}",
        text_table(
            &["Utility", "Method", "Mean Abs. Rel. Diff. (%)", "Std. Rel. Diff. (%)", "Offline Train (s)", "Online /Pair (ms)"],
            &[vec![
                row.utility.clone(),
                row.method.clone(),
                pm(row.mean_abs_rel_diff_pct, row.mean_abs_rel_diff_pct_sd, 3),
                pm(row.std_rel_diff_pct, row.std_rel_diff_pct_sd, 3),
                pm(row.offline_train_s, row.offline_train_s_sd, 0),
                pm(row.online_per_pair_ms, row.online_per_pair_ms_sd, 1),
            ]],
        )
    );
    if row.failed_points > 0 {
        println!("{} (seed, x0) pairs had no interior primal minimum; see compare_points.csv", row.failed_points);
    }
    finish(manifest, out, &[points_path, table_path])
}

fn cmd_consistency(cfg: &ExperimentConfig, out: &Path, kind: CheckArg, checkpoints: &[PathBuf]) -> Result<()> {
    let mut manifest = Manifest::new("consistency", cfg);
    let kinds: Vec<CheckKind> = match kind {
        CheckArg::Wealth => vec![CheckKind::Wealth],
        CheckArg::Control => vec![CheckKind::Control],
        CheckArg::Both => vec![CheckKind::Wealth, CheckKind::Control],
    };
    let mut all: Vec<SeededReport> = Vec::new();
    for t in surfaces(cfg, out, checkpoints)? {
        let started = Instant::now();
        let s = exp::surface(cfg, t.net)?;
        all.extend(exp::consistency_seed(cfg, t.seed, &s, &kinds)?);
        manifest.time(format!("consistency seed {}", t.seed), started.elapsed().as_secs_f64());
    }
    let cells_path = out.join("consistency_cells.csv");
    report::write_csv(&cells_path, &all.iter().map(CellRow::from).collect::<Vec<_>>())?;
    let mut outputs = vec![cells_path];
    let mut rows = Vec::new();
    for k in &kinds {
        let subset: Vec<SeededReport> = all.iter().filter(|r| r.report.kind == *k).cloned().collect();
        let summary = aggregate_over_seeds(&subset, cfg.utility.label(), cfg.loss_kind.label()).map_err(ExperimentError::from)?;
        let name = match k {
            CheckKind::Wealth => "wealth",
            CheckKind::Control => "control",
        };
        let summary_path = out.join(format!("consistency_{name}_summary.csv"));
        let plot_path = out.join(format!("consistency_{name}_plot.csv"));
        report::write_csv(&summary_path, std::slice::from_ref(&summary))?;
        report::write_csv(&plot_path, &plot_series(&subset))?;
        outputs.extend([summary_path, plot_path]);
        rows.push(vec![
            summary.utility.clone(),
            summary.method.clone(),
            name.to_string(),
            format!("{:.3} ± {:.3}", summary.mean_abs_rel_diff_pct, summary.mean_abs_rel_diff_pct_sd),
            format!("{:.3} ± {:.3}", summary.std_rel_diff_pct, summary.std_rel_diff_pct_sd),
            format!("{:.3} ± {:.3}", summary.avg_time_s, summary.avg_time_s_sd),
        ]);
    }
    println!(
        "{}",
        text_table(&["Utility", "Method", "Check", "Mean Abs. Rel. Diff. (%)", "Std Rel. Diff. (%)", "Average Time (s)"], &rows)
    );
    finish(manifest, out, &outputs)
}

#[derive(Serialize)]
struct PrimalOracleRow {
    t: f64,
    x0: f64,
    value: f64,
    y_star: f64,
}

fn cmd_oracle(cfg: &ExperimentConfig, out: &Path, kind: OracleArg, ts: &[f64], ys: &[f64]) -> Result<()> {
    let mut manifest = Manifest::new("oracle", cfg);
    let mut outputs = Vec::new();
    let rows = match kind {
        OracleArg::Btm => {
            let rows = exp::btm_oracle(cfg, ts, ys)?;
            let btm = exp::btm_column(cfg)?;
            manifest.time("btm primal column", btm.seconds);
            let primal: Vec<_> = cfg
                .x0
                .iter()
                .zip(&btm.values)
                .map(|(&x0, &(value, y_star))| PrimalOracleRow { t: 0.0, x0, value, y_star })
                .collect();
            let p = out.join("oracle_btm_primal.csv");
            report::write_csv(&p, &primal)?;
            outputs.push(p);
            let p = out.join("oracle_btm.csv");
            report::write_csv(&p, &rows)?;
            outputs.insert(0, p);
            rows
        }
        OracleArg::Psor => {
            let (sol, rows) = exp::psor_oracle(cfg, ts, ys)?;
            let diag = PsorDiagnostics::from((cfg, &sol));
            println!(
                "psor: complementarity {:.3e}, min operator {:.3e}, min gap {:.3e}",
                diag.complementarity, diag.min_operator, diag.min_gap
            );
            let p = out.join("oracle_psor.csv");
            report::write_csv(&p, &rows)?;
            outputs.push(p);
            let p = out.join("oracle_psor_diagnostics.json");
            report::write_json(&p, &diag)?;
            outputs.push(p);
            rows
        }
    };
    for r in &rows {
        manifest.time(format!("{} t={} y={}", r.method, r.t, r.y), r.seconds);
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.method.clone(), fmt(r.t, 3), fmt(r.y, 4), fmt(r.value, 6), fmt(r.payoff, 6)])
        .collect();
    println!("{}", text_table(&["method", "t", "y", "value", "payoff"], &table));
    finish(manifest, out, &outputs)
}

#[derive(Serialize)]
struct EvaluateRow {
    t: f64,
    x: f64,
    value: f64,
    y_star: f64,
    wealth: f64,
    wealth_flagged: bool,
    control: f64,
    control_flagged: bool,
    error: String,
}

fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, ts: &[f64], xs: &[f64], method: MethodArg) -> Result<()> {
    let manifest = Manifest::new("evaluate", cfg);
    let t = exp::load_seed(cfg, checkpoint)?;
    let s = exp::surface(cfg, t.net)?;
    let xs = if xs.is_empty() { cfg.x0.clone() } else { xs.to_vec() };
    let method = match method {
        MethodArg::Grid => PrimalMethod::Grid,
        MethodArg::Bisection => PrimalMethod::Bisection,
    };
    let queries: Vec<PrimalQuery> = ts.iter().flat_map(|&t| xs.iter().map(move |&x| PrimalQuery { t, x })).collect();
    let mut rows = Vec::new();
    for (q, res) in queries.iter().zip(s.evaluate_batch(&queries, method)) {
        let row = match res.map_err(ExperimentError::from).and_then(|r| {
            let w = s.optimal_wealth(r.t, r.y_star)?;
            let c = s.optimal_control(r.t, r.y_star)?;
            Ok((r, w, c))
        }) {
            Ok((r, w, c)) => EvaluateRow {
                t: q.t,
                x: q.x,
                value: r.value,
                y_star: r.y_star,
                wealth: w.value,
                wealth_flagged: w.flagged,
                control: c.value,
                control_flagged: c.flagged,
                error: String::new(),
            },
            Err(e) => EvaluateRow {
                t: q.t,
                x: q.x,
                value: f64::NAN,
                y_star: f64::NAN,
                wealth: f64::NAN,
                wealth_flagged: false,
                control: f64::NAN,
                control_flagged: false,
                error: e.to_string(),
            },
        };
        rows.push(row);
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![fmt(r.t, 3), fmt(r.x, 3), fmt(r.value, 6), fmt(r.y_star, 5), fmt(r.wealth, 5), fmt(r.control, 5)])
        .collect();
    println!("{}", text_table(&["t", "x", "V", "y*", "X*", "pi*"], &table));
    let p = out.join("evaluate.csv");
    report::write_csv(&p, &rows)?;
    finish(manifest, out, &[p])
}
