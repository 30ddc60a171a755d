use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use sinkauction_core::mechanism::{truthful_utilities, utility};
use sinkauction_core::training::{misreport_ascent, sample_valuations};
use sinkauction_core::{
    AllocationHead, DemandSpec, Mechanism, MechanismParams, SinkhornConfig, ValuationProfile, Vcg,
};

use super::rng;

pub const DEMANDS: [(bool, usize, usize); 6] = [
    (true, 1, 2),
    (false, 1, 2),
    (true, 2, 3),
    (false, 2, 3),
    (true, 2, 2),
    (false, 3, 3),
];

pub fn demand(unit: bool, n: usize, m: usize) -> DemandSpec {
    if unit {
        DemandSpec::unit_demand(n, m)
    } else {
        DemandSpec::exactly_one(n, m)
    }
}

#[derive(Clone, Debug, Default)]
pub struct InvariantReport {
    pub profiles: usize,
    pub worst_ir: f64,
    pub min_regret: f64,
}

/// Random networks on random profiles: truthful utility is at least
/// `-1e-9`, allocations are feasible for the demand type within the
/// Sinkhorn tolerance, and ascent regret is nonnegative. Each case draws
/// fresh parameters and `per_case` profiles.
pub fn learned_mechanism_invariants(cases: u32, per_case: usize, seed: u64) -> Result<InvariantReport, String> {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::from_seed(
            proptest::test_runner::RngAlgorithm::ChaCha,
            &{
                let mut s = [0u8; 32];
                s[..8].copy_from_slice(&seed.to_le_bytes());
                s
            },
        ),
    );
    let report = std::cell::RefCell::new(InvariantReport {
        min_regret: f64::INFINITY,
        ..InvariantReport::default()
    });
    let strategy = (0..DEMANDS.len(), any::<u64>());
    runner
        .run(&strategy, |(which, case_seed)| {
            let (unit, n, m) = DEMANDS[which];
            let d = demand(unit, n, m);
            let mut r = rng(case_seed);
            let params = MechanismParams::init(d, SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut r)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let profiles = sample_valuations(n, m, per_case, &mut r);
            let outs = params.outcomes(&profiles).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let tol = params.sinkhorn.tol;
            let mut rep = report.borrow_mut();
            for (p, o) in profiles.iter().zip(&outs) {
                for u in truthful_utilities(p, o) {
                    prop_assert!(u >= -1e-9, "IR violated: utility {}", u);
                    rep.worst_ir = rep.worst_ir.min(u);
                }
                prop_assert!(o.allocation.is_feasible(&d, tol), "infeasible allocation {:?} for {:?}", o.allocation, d);
            }
            let ascent = misreport_ascent(&params, &profiles, 25, 0.1).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for &g in ascent.regrets.data() {
                prop_assert!(g >= 0.0, "negative regret {}", g);
                rep.min_regret = rep.min_regret.min(g);
            }
            for &x in ascent.reports.data() {
                prop_assert!((0.0..=1.0).contains(&x), "report {} left [0, 1]", x);
            }
            rep.profiles += profiles.len();
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(report.into_inner())
}

/// Largest utility gain from any grid deviation under VCG, over `instances`
/// random 2x2 unit-demand profiles and a `grid` x `grid` deviation lattice.
pub fn vcg_best_deviation_gain(instances: usize, grid: usize, seed: u64) -> f64 {
    let d = DemandSpec::unit_demand(2, 2);
    let vcg = Vcg::new(d).unwrap();
    let mut r = rng(seed);
    let step = 1.0 / (grid - 1) as f64;
    let mut worst = f64::NEG_INFINITY;
    for truth in sample_valuations(2, 2, instances, &mut r) {
        let honest = vcg.outcome(&truth).unwrap();
        for i in 0..2 {
            let base = utility(truth.row(i), honest.allocation.row(i), honest.payments.0[i]);
            let lies: Vec<ValuationProfile> = (0..grid * grid)
                .map(|c| truth.with_report(i, &[(c / grid) as f64 * step, (c % grid) as f64 * step]))
                .collect();
            for o in vcg.outcomes(&lies).unwrap() {
                let gain = utility(truth.row(i), o.allocation.row(i), o.payments.0[i]) - base;
                worst = worst.max(gain);
            }
        }
    }
    worst
}
