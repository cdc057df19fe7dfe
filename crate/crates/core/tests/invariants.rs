use dualstop::benchmarks::{btm_dual_value, TreeSpec};
use dualstop::dual_primal::{DualSurface, PrimalMethod};
use dualstop::experiment::CompareRow;
use dualstop::jetnet::{AnalyticField, Jet2};
use dualstop::loss::DomainSpec;
use dualstop::market::{MarketParams, UtilityFamily};
use dualstop::report::{read_csv, write_csv};
use dualstop::trainer::learning_rate;
use proptest::prelude::*;

/// `V~(y) = 1/y`, constant in time, so `V(x) = 2 sqrt(x)` and `y* = x^(-1/2)`.
fn reciprocal() -> DualSurface<AnalyticField<impl Fn(f64, f64) -> Jet2>> {
    let m = MarketParams::example_one();
    let domain = DomainSpec::standard(&m.derived().unwrap());
    let field = AnalyticField(|_tau: f64, z: f64| {
        let e = (-z).exp();
        Jet2::new(e, 0.0, -e, e)
    });
    DualSurface::new(field, m, UtilityFamily::Power { gamma: 0.5 }, domain).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn time_change_round_trips(t in 0.0f64..1.0) {
        let c = MarketParams::example_one().derived().unwrap();
        prop_assert!((c.t_of(1.0, c.tau_of(1.0, t)) - t).abs() <= 1e-15);
    }

    #[test]
    fn log_change_round_trips(y in 0.05f64..20.0) {
        prop_assert!((y.ln().exp() - y).abs() <= 1e-15 * y.max(1.0) * 4.0);
    }

    #[test]
    fn primal_minimisers_agree_with_closed_form(x in 1.1f64..2.0, t in 0.0f64..1.0) {
        let s = reciprocal();
        let g = s.primal_value(t, x, PrimalMethod::Grid).unwrap();
        let b = s.primal_value(t, x, PrimalMethod::Bisection).unwrap();
        let exact = 2.0 * x.sqrt();
        prop_assert!((g.value - exact).abs() < 1e-6 * exact);
        prop_assert!((b.value - exact).abs() < 1e-9 * exact);
        prop_assert!((b.y_star - 1.0 / x.sqrt()).abs() < 1e-7);
        // V = V~(y*) + x y* holds by construction
        let dv = s.dual_value(t, b.y_star).unwrap();
        prop_assert!((b.value - (dv.v + x * b.y_star)).abs() < 1e-12);
        // first-order condition: -V~_y(y*) recovers x
        let w = s.optimal_wealth(t, b.y_star).unwrap();
        prop_assert!((w.value - x).abs() / x < 1e-6);
    }

    #[test]
    fn schedule_halves_on_cadence(lr0 in 1e-5f64..1e-1, every in 1usize..5000, epoch in 0usize..20_000) {
        let lr = learning_rate(lr0, every, epoch);
        prop_assert!(lr <= lr0 && lr > 0.0);
        prop_assert_eq!(learning_rate(lr0, every, epoch + every), lr / 2.0);
    }
}

#[test]
fn band_edge_minimum_is_an_error() {
    // y* = 1/sqrt(x) leaves the band [1/e, e] once x > e^2
    assert!(reciprocal().primal_value(0.0, 10.0, PrimalMethod::Grid).is_err());
}

#[test]
fn tree_value_grows_with_horizon() {
    for fam in [UtilityFamily::Power { gamma: 0.5 }, UtilityFamily::NonHara] {
        for y in [1.6, 2.0, 2.7] {
            let mut last = f64::NEG_INFINITY;
            for horizon in [0.25, 0.5, 1.0, 2.0] {
                let mut m = MarketParams::example_one();
                m.horizon = horizon;
                let v = btm_dual_value(&TreeSpec::new(400, m, fam), 0.0, y).unwrap();
                assert!(v >= last - 1e-12, "{fam:?} y={y} T={horizon}: {v} < {last}");
                last = v;
            }
        }
    }
}

#[test]
fn compare_rows_round_trip_through_csv() {
    let rows = vec![
        CompareRow {
            train_seed: 0,
            t: 0.0,
            x0: 1.1,
            v_net: 0.7261,
            y_star_net: 2.44,
            v_btm: 0.72569,
            y_star_btm: 2.439,
            rel_diff_pct: 0.0565,
            error: String::new(),
        },
        CompareRow {
            train_seed: 1,
            t: 0.0,
            x0: 2.0,
            v_net: f64::NAN,
            y_star_net: f64::NAN,
            v_btm: 2.0,
            y_star_btm: 1.0,
            rel_diff_pct: f64::NAN,
            error: "no interior minimum, \"edge\"".into(),
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rows.csv");
    write_csv(&p, &rows).unwrap();
    let back: Vec<CompareRow> = read_csv(&p).unwrap();
    assert_eq!(back[0], rows[0]);
    assert_eq!(back[1].error, rows[1].error);
    assert!(back[1].v_net.is_nan());
}
