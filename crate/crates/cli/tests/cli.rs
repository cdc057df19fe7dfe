use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualstop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualstop")).args(args).output().expect("binary runs")
}

const TINY: &[&str] = &[
    "--set",
    "train.epochs=300",
    "--set",
    "train.depth=2",
    "--set",
    "train.width=8",
    "--set",
    r#"train.batch={"interior": 64, "bottom": 32, "lateral": 16}"#,
    "--set",
    "train.seeds=[0]",
    "--set",
    "btm_steps=200",
    "--set",
    "sim.paths=5",
    "--set",
    "sim.seeds=[60]",
    "--set",
    "x0=[1.5, 1.8]",
];

fn with_tiny<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(TINY);
    v.extend_from_slice(&["--out", out]);
    v
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_compare_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dualstop(&with_tiny(&["train"], out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = dir.path().join("seed_0/checkpoint.json");
    assert!(ck.is_file());
    assert!(dir.path().join("seed_0/train_log.csv").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 300);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let o = dualstop(&with_tiny(&["compare"], out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Mean Abs. Rel. Diff. (%)"));
    assert_eq!(
        header(&dir.path().join("compare_table.csv")),
        "utility,method,seeds,failed_points,mean_abs_rel_diff_pct,mean_abs_rel_diff_pct_sd,std_rel_diff_pct,std_rel_diff_pct_sd,offline_train_s,offline_train_s_sd,online_per_pair_ms,online_per_pair_ms_sd"
    );
    let points = fs::read_to_string(dir.path().join("compare_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 3);

    let ck_s = ck.to_str().unwrap();
    let o = dualstop(&with_tiny(&["evaluate", "--checkpoint", ck_s, "--x", "1.5"], out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(header(&dir.path().join("evaluate.csv")).starts_with("t,x,value,y_star,wealth"));

    // the same checkpoint under a different loss kind is a validation failure
    let mut args = with_tiny(&["compare", "--checkpoint", ck_s], out);
    args.extend_from_slice(&["--set", "loss_kind=dgm"]);
    assert_eq!(dualstop(&args).status.code(), Some(2));
}

#[test]
fn consistency_writes_tables_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(dualstop(&with_tiny(&["train"], out)).status.success());
    let o = dualstop(&with_tiny(&["consistency", "--kind", "both"], out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["wealth", "control"] {
        assert_eq!(
            header(&dir.path().join(format!("consistency_{name}_summary.csv"))),
            "utility,method,check,mean_abs_rel_diff_pct,mean_abs_rel_diff_pct_sd,std_rel_diff_pct,std_rel_diff_pct_sd,avg_time_s,avg_time_s_sd"
        );
        let plot = fs::read_to_string(dir.path().join(format!("consistency_{name}_plot.csv"))).unwrap();
        assert_eq!(plot.lines().count(), 3);
    }
    let cells = fs::read_to_string(dir.path().join("consistency_cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 2);
}

#[test]
fn oracle_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dualstop(&with_tiny(&["oracle", "--kind", "btm", "--t", "0,0.5", "--y", "0.6,1.6"], out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(dir.path().join("oracle_btm.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "method,t,y,value,payoff,seconds");
    assert_eq!(rows.lines().count(), 5);
    assert!(dir.path().join("oracle_btm_primal.csv").is_file());

    let mut args = with_tiny(&["oracle", "--kind", "psor"], out);
    args.extend_from_slice(&["--set", "psor.n_tau=20", "--set", "psor.n_z=40"]);
    let o = dualstop(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("oracle_psor_diagnostics.json").is_file());
    assert!(dir.path().join("manifest_oracle.json").is_file());
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"train\": {\n    \"epochs\": 10,\n    \"epoch\": 3\n  }\n}").unwrap();
    let o = dualstop(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));

    let syntax = dir.path().join("syntax.json");
    fs::write(&syntax, "{\n  \"train\": {\n    \"epochs\": ,\n  }\n}").unwrap();
    let o = dualstop(&["train", "--config", syntax.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(dualstop(&["train", "--set", "market.sigma=-1", "--out", out]).status.code(), Some(2));
    assert_eq!(dualstop(&["train", "--set", "no_such_key=1", "--out", out]).status.code(), Some(2));
    assert_eq!(dualstop(&["compare", "--out", out]).status.code(), Some(2));
    assert_eq!(dualstop(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // an absurd learning rate diverges
    let o = dualstop(&with_tiny(&["train", "--set", "train.lr0=1e300"], out));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}
