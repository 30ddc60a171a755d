//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero if any fails. Pass criterion numbers after `--` to run
//! a subset, e.g. `cargo test --test acceptance -- 4 5`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::diff::{mlp_error, op_errors, pipeline_error, unrolled_sinkhorn_error};
use common::invariants::{learned_mechanism_invariants, vcg_best_deviation_gain};
use common::oracle::compare_with_exact;
use common::rng;
use sinkauction_core::evaluation::{
    exactly_one_boundary_distance, mean_revenue, unit_demand_boundary_distance, RegretConfig,
    DEFAULT_RESOLUTION,
};
use sinkauction_core::training::sample_valuations;
use sinkauction_core::{
    evaluate, heatmap_grid, train, DemandSpec, EpochMetrics, EvalConfig, EvalReport, Marginals,
    MechanismParams, PostedPrices, SinkhornConfig, TrainConfig, ValuationProfile, Vcg,
};

struct Trained {
    params: MechanismParams,
    history: Vec<EpochMetrics>,
    train_seconds: f64,
    report: EvalReport,
}

fn train_and_evaluate(demand: DemandSpec) -> Trained {
    let start = Instant::now();
    let out = train(TrainConfig::desk_scale(demand)).expect("training failed");
    let train_seconds = start.elapsed().as_secs_f64();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cfg = EvalConfig {
        regret: RegretConfig {
            threads,
            ..RegretConfig::default()
        },
        ..EvalConfig::default()
    };
    let report = evaluate(&out.params, &cfg).expect("evaluation failed");
    Trained {
        params: out.params,
        history: out.history,
        train_seconds,
        report,
    }
}

#[derive(Default)]
struct Models {
    unit: Option<Trained>,
    exactly_one: Option<Trained>,
}

impl Models {
    fn unit(&mut self) -> &Trained {
        self.unit
            .get_or_insert_with(|| train_and_evaluate(DemandSpec::unit_demand(1, 2)))
    }

    fn exactly_one(&mut self) -> &Trained {
        self.exactly_one
            .get_or_insert_with(|| train_and_evaluate(DemandSpec::exactly_one(1, 2)))
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn in_range(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn c1(models: &mut Models) -> Verdict {
    let t = models.unit();
    let (rev, rgt) = (t.report.revenue_mean, t.report.regret_mean);
    let pass = in_range(rev, 0.37, 0.41) && rgt <= 0.005 && t.train_seconds <= 90.0 * 60.0;
    verdict(
        pass,
        format!(
            "revenue {:.4} in [0.37, 0.41], regret {:.5} <= 0.005, training {:.0}s <= 5400s",
            rev, rgt, t.train_seconds
        ),
    )
}

fn c2(models: &mut Models) -> Verdict {
    let t = models.exactly_one();
    let (rev, rgt) = (t.report.revenue_mean, t.report.regret_mean);
    let grid = heatmap_grid(&t.params, DEFAULT_RESOLUTION).expect("heatmap");
    let (agree, cells) = grid
        .agreement(&PostedPrices::exactly_one_optimal(), exactly_one_boundary_distance, 0.05)
        .expect("agreement");
    let pass = in_range(rev, 0.06, 0.09) && rgt <= 0.005 && agree >= 0.9;
    verdict(
        pass,
        format!(
            "revenue {:.4} in [0.06, 0.09], regret {:.5} <= 0.005, heatmap agreement {:.3} >= 0.9 over {} cells",
            rev, rgt, agree, cells
        ),
    )
}

fn c3(_: &mut Models) -> Verdict {
    let t = train_and_evaluate(DemandSpec::exactly_one(2, 3));
    let (rev, rgt) = (t.report.revenue_mean, t.report.regret_mean);
    let vcg = t.report.vcg_revenue.expect("vcg baseline");
    let pass = rev >= 0.15 && rgt <= 0.01 && rev > vcg;
    verdict(
        pass,
        format!(
            "revenue {:.4} >= 0.15, regret {:.5} <= 0.01, vcg {:.4} < revenue, training {:.0}s",
            rev, rgt, vcg, t.train_seconds
        ),
    )
}

fn c4(_: &mut Models) -> Verdict {
    let samples = sample_valuations(1, 2, 1_000_000, &mut rng(401));
    let unit = mean_revenue(&PostedPrices::unit_demand_optimal(), &samples).unwrap();
    let one = mean_revenue(&PostedPrices::exactly_one_optimal(), &samples).unwrap();
    let multi = sample_valuations(2, 3, 1_000_000, &mut rng(402));
    let vcg = mean_revenue(&Vcg::new(DemandSpec::unit_demand(2, 3)).unwrap(), &multi).unwrap();
    let checks = [(unit - 0.393).abs() <= 0.002, (one - 0.069).abs() <= 0.002, (vcg - 0.048).abs() <= 0.005];
    let mark = |ok: bool| if ok { "ok" } else { "MISS" };
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "unit-demand menu {:.5} vs 0.393 +- 0.002 [{}], exactly-one menu {:.5} vs 0.069 +- 0.002 [{}], vcg 2x3 {:.5} vs 0.048 +- 0.005 [{}]",
            unit,
            mark(checks[0]),
            one,
            mark(checks[1]),
            vcg,
            mark(checks[2])
        ),
    )
}

fn c5(_: &mut Models) -> Verdict {
    let start = Instant::now();
    let cfg = SinkhornConfig::with_final_eps(0.01);
    let cmp = compare_with_exact(&[4, 5], 200, &cfg, 501);
    let secs = start.elapsed().as_secs_f64();
    let pass = cmp.worst_gap <= 0.05
        && cmp.worst_row < cfg.tol
        && cmp.worst_col < cfg.tol
        && cmp.oracle_mismatches == 0
        && secs < 60.0;
    verdict(
        pass,
        format!(
            "{} instances, worst gap {:.4} <= 0.05, worst row violation {:.2e} and column violation {:.2e} < 0.01, {:.1}s",
            cmp.instances, cmp.worst_gap, cmp.worst_row, cmp.worst_col, secs
        ),
    )
}

fn c6(_: &mut Models) -> Verdict {
    let start = Instant::now();
    let ops = (0..3).flat_map(op_errors).map(|(_, e)| e).fold(0.0, f64::max);
    let ops = ops.max(mlp_error(20, 601));
    let square = Marginals::uniform(4, 4, 4.0).unwrap();
    let dummies = Marginals::for_demand(&DemandSpec::unit_demand(2, 3)).unwrap();
    let unrolled = unrolled_sinkhorn_error(&square, 50, 0.05, 602).max(unrolled_sinkhorn_error(&dummies, 50, 0.05, 603));
    let pipeline = [
        (DemandSpec::unit_demand(1, 2), 604),
        (DemandSpec::exactly_one(1, 2), 605),
        (DemandSpec::exactly_one(2, 3), 606),
    ]
    .into_iter()
    .map(|(d, s)| pipeline_error(d, 8, 20, s))
    .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = ops <= 1e-4 && unrolled <= 1e-3 && pipeline <= 1e-3 && secs < 300.0;
    verdict(
        pass,
        format!(
            "ops {:.1e} <= 1e-4, 50 unrolled updates {:.1e} <= 1e-3, pipeline {:.1e} <= 1e-3, {:.1}s",
            ops, unrolled, pipeline, secs
        ),
    )
}

fn c7(_: &mut Models) -> Verdict {
    let start = Instant::now();
    let learned = learned_mechanism_invariants(100, 100, 701);
    let gain = vcg_best_deviation_gain(100, 21, 702);
    let secs = start.elapsed().as_secs_f64();
    match learned {
        Ok(rep) => verdict(
            rep.profiles == 10_000 && gain <= 1e-9 && secs < 600.0,
            format!(
                "{} profiles: worst truthful utility {:.2e}, min regret {:.2e}, all feasible; vcg best deviation gain {:.1e} <= 1e-9, {:.1}s",
                rep.profiles, rep.worst_ir, rep.min_regret, gain, secs
            ),
        ),
        Err(e) => verdict(false, format!("invariant violated: {}", e)),
    }
}

fn c8(models: &mut Models) -> Verdict {
    let t = models.exactly_one();
    let at = |eps: f64| {
        let mut p = t.params.clone();
        p.sinkhorn = SinkhornConfig {
            schedule: SinkhornConfig::with_final_eps(eps).schedule,
            ..t.params.sinkhorn.clone()
        };
        heatmap_grid(&p, DEFAULT_RESOLUTION).expect("heatmap").max_gradient()
    };
    let (coarse, sharp) = (at(0.05), at(0.02));
    verdict(
        sharp > coarse,
        format!("max allocation gradient {:.3} at eps 0.02 > {:.3} at eps 0.05", sharp, coarse),
    )
}

/// Spot checks on the trained unit-demand model; reported but not a
/// criterion.
fn unit_model_notes(models: &mut Models) -> String {
    let t = models.unit();
    let bid = ValuationProfile::new(1, 2, vec![0.9, 0.1]).unwrap();
    let g = t.params.allocate(&bid).map(|a| a.get(0, 0)).unwrap_or(f64::NAN);
    let agree = heatmap_grid(&t.params, DEFAULT_RESOLUTION)
        .and_then(|grid| grid.agreement(&PostedPrices::unit_demand_optimal(), unit_demand_boundary_distance, 0.05))
        .map_or(f64::NAN, |(a, _)| a);
    let (first, last) = (t.history.first().unwrap(), t.history.last().unwrap());
    format!(
        "unit-demand model: item-1 allocation at (0.9, 0.1) {:.3}, heatmap agreement {:.3}, revenue {:.4} -> {:.4}, regret {:.5} -> {:.5} over training",
        g, agree, first.revenue_mean, last.revenue_mean, first.regret_mean, last.regret_mean
    )
}

type Criterion = fn(&mut Models) -> Verdict;

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("unit-demand 1x2 desk-scale training", c1),
        ("exactly-one 1x2 training and heatmap", c2),
        ("exactly-one 2x3 training vs vcg", c3),
        ("analytic and vcg baseline revenue", c4),
        ("sinkhorn vs exact matching", c5),
        ("differentiability", c6),
        ("invariants", c7),
        ("heatmap sharpens at lower eps", c8),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|k| (1..=8).contains(k))
        .collect();
    let mut models = Models::default();
    let mut failed = 0;
    let out = std::io::stdout();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let k = k + 1;
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| run(&mut models)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                verdict(false, format!("panicked: {}", msg))
            });
        if !v.pass {
            failed += 1;
        }
        let mut o = out.lock();
        writeln!(
            o,
            "criterion {} ({}): {} | {} [{:.0}s]",
            k,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        )
        .unwrap();
        o.flush().unwrap();
    }
    if models.unit.is_some() {
        println!("note: {}", unit_model_notes(&mut models));
    }
    if failed > 0 {
        println!("{} acceptance criteria failed", failed);
        std::process::exit(1);
    }
}
