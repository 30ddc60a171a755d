mod common;

use common::invariants::vcg_best_deviation_gain;
use common::{assignments, brute_force_welfare, rng};
use sinkauction_core::evaluation::{
    analytic_optimum, exactly_one_boundary_distance, heatmap_grid, mean_revenue, test_regret,
    unit_demand_boundary_distance, RegretConfig, UNIT_DEMAND_PRICE,
};
use sinkauction_core::mechanism::utility;
use sinkauction_core::training::sample_valuations;
use sinkauction_core::{
    evaluate, AllocationHead, DemandSpec, EvalConfig, MechanismParams, PostedPrices, SinkhornConfig, Vcg,
};

#[test]
fn analytic_menus_have_no_regret() {
    let test = sample_valuations(1, 2, 1000, &mut rng(41));
    for mech in [PostedPrices::unit_demand_optimal(), PostedPrices::exactly_one_optimal()] {
        let stats = test_regret(&mech, &test, &RegretConfig::default()).unwrap();
        assert!(stats.mean <= 1e-6, "{}", stats.mean);
    }
}

#[test]
fn more_restarts_never_lower_regret() {
    let mut r = rng(42);
    let params = MechanismParams::init(DemandSpec::exactly_one(2, 3), SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut r).unwrap();
    let test = sample_valuations(2, 3, 20, &mut r);
    let run = |restarts| {
        let cfg = RegretConfig {
            iters: 20,
            restarts,
            ..RegretConfig::default()
        };
        test_regret(&params, &test, &cfg).unwrap()
    };
    let (one, ten) = (run(1), run(10));
    for (a, b) in one.values.data().iter().zip(ten.values.data()) {
        assert!(b >= a);
    }
    assert!(ten.mean >= one.mean);
}

#[test]
fn regret_is_independent_of_thread_count() {
    let mut r = rng(43);
    let params = MechanismParams::init(DemandSpec::unit_demand(1, 2), SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut r).unwrap();
    let test = sample_valuations(1, 2, 600, &mut r);
    let cfg = |threads| RegretConfig {
        iters: 5,
        restarts: 2,
        threads,
        ..RegretConfig::default()
    };
    assert_eq!(test_regret(&params, &test, &cfg(1)).unwrap(), test_regret(&params, &test, &cfg(3)).unwrap());
}

#[test]
fn vcg_allocation_maximizes_welfare() {
    let mut r = rng(44);
    for (n, m) in [(2, 2), (2, 3), (3, 3), (3, 4)] {
        for (demand, allow_empty) in [(DemandSpec::unit_demand(n, m), true), (DemandSpec::exactly_one(n, m), false)] {
            let vcg = Vcg::new(demand).unwrap();
            for v in sample_valuations(n, m, 25, &mut r) {
                let rows: Vec<Vec<f64>> = (0..n).map(|i| v.row(i).to_vec()).collect();
                let o = vcg.outcome(&v).unwrap();
                let welfare: f64 = (0..n).map(|i| utility(v.row(i), o.allocation.row(i), 0.0)).sum();
                assert!((welfare - brute_force_welfare(&rows, m, allow_empty)).abs() < 1e-9);
                assert!(o.allocation.is_feasible(&demand, 1e-12));
                for i in 0..n {
                    let others: Vec<Vec<f64>> = (0..n).filter(|&k| k != i).map(|k| rows[k].clone()).collect();
                    let without = brute_force_welfare(&others, m, allow_empty);
                    let others_now = welfare - utility(v.row(i), o.allocation.row(i), 0.0);
                    let clarke = (without - others_now).max(0.0);
                    assert!((o.payments.0[i] - clarke).abs() < 1e-9);
                }
            }
        }
    }
    assert_eq!(assignments(2, 3, false).len(), 6);
    assert_eq!(assignments(2, 2, true).len(), 7);
}

#[test]
fn vcg_is_truthful_on_deviation_grid() {
    let gain = vcg_best_deviation_gain(100, 21, 45);
    assert!(gain <= 1e-9, "{}", gain);
}

#[test]
fn vcg_revenue_two_by_three_unit_demand() {
    let samples = sample_valuations(2, 3, 100_000, &mut rng(46));
    let rev = mean_revenue(&Vcg::new(DemandSpec::unit_demand(2, 3)).unwrap(), &samples).unwrap();
    assert!((rev - 0.048).abs() <= 0.005, "{}", rev);
}

#[test]
fn analytic_heatmap_boundaries() {
    let unit = heatmap_grid(&PostedPrices::unit_demand_optimal(), 101).unwrap();
    let (agree, cells) = unit.agreement(&PostedPrices::unit_demand_optimal(), unit_demand_boundary_distance, 0.0).unwrap();
    assert_eq!((agree, cells > 0), (1.0, true));
    for (v1, v2, g1, g2, p) in unit.rows() {
        let sold = v1.max(v2) >= UNIT_DEMAND_PRICE;
        assert_eq!(g1 + g2, if sold { 1.0 } else { 0.0 });
        assert_eq!(p, if sold { UNIT_DEMAND_PRICE } else { 0.0 });
    }
    let one = heatmap_grid(&PostedPrices::exactly_one_optimal(), 101).unwrap();
    for (v1, v2, g1, g2, _) in one.rows() {
        if exactly_one_boundary_distance(v1, v2) > 1e-9 {
            assert_eq!((g1, g2), if v2 - v1 > 1.0 / 3.0 { (0.0, 1.0) } else { (1.0, 0.0) });
        }
    }
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let mut r = rng(47);
    let params = MechanismParams::init(DemandSpec::unit_demand(1, 2), SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut r).unwrap();
    let cfg = EvalConfig {
        test_size: 40,
        regret: RegretConfig {
            iters: 10,
            restarts: 2,
            ..RegretConfig::default()
        },
        seed: 5,
    };
    let a = evaluate(&params, &cfg).unwrap();
    assert_eq!(format!("{:?}", a), format!("{:?}", evaluate(&params, &cfg).unwrap()));
    let test = sample_valuations(1, 2, 40, &mut rng(5));
    let stats = test_regret(&params, &test, &cfg.regret).unwrap();
    assert_eq!((a.regret_mean, a.regret_std, &a.regret_per_bidder), (stats.mean, stats.std, &stats.per_bidder));
    assert_eq!(a.samples, 40);
    assert!(a.revenue_mean >= 0.0 && a.regret_mean >= 0.0);
    let opt = mean_revenue(&analytic_optimum(&params.demand).unwrap(), &test).unwrap();
    assert_eq!(a.optimal_revenue, Some(opt));
    assert!(a.vcg_revenue.is_some());
}
