use sinkauction_core::transport::{exact_matching_oracle, sinkhorn_solve};
use sinkauction_core::{Marginals, SinkhornConfig, Tensor};

use super::{brute_force_assignment_cost, rng, uniform};

#[derive(Clone, Debug, Default)]
pub struct OracleComparison {
    pub instances: usize,
    /// Worst `(<P, C> - opt) / opt`.
    pub worst_gap: f64,
    /// Worst relative row violation.
    pub worst_row: f64,
    /// Worst relative column violation.
    pub worst_col: f64,
    /// Instances where the exact oracle disagreed with enumeration.
    pub oracle_mismatches: usize,
}

pub fn transport_cost(plan: &Tensor, cost: &Tensor) -> f64 {
    plan.data().iter().zip(cost.data()).map(|(p, c)| p * c).sum()
}

pub fn col_violation(plan: &Tensor, b: &[f64]) -> f64 {
    let (r, k) = (plan.shape()[0], plan.shape()[1]);
    (0..k)
        .filter(|&j| b[j] > 0.0)
        .map(|j| ((0..r).map(|i| plan.at2(i, j)).sum::<f64>() - b[j]).abs() / b[j])
        .fold(0.0, f64::max)
}

pub fn row_violation(plan: &Tensor, a: &[f64]) -> f64 {
    let (r, k) = (plan.shape()[0], plan.shape()[1]);
    (0..r)
        .filter(|&i| a[i] > 0.0)
        .map(|i| ((0..k).map(|j| plan.at2(i, j)).sum::<f64>() - a[i]).abs() / a[i])
        .fold(0.0, f64::max)
}

/// `count` random square costs in `[0, 1]` of each size, unit marginals.
pub fn compare_with_exact(sizes: &[usize], count: usize, cfg: &SinkhornConfig, seed: u64) -> OracleComparison {
    let mut r = rng(seed);
    let mut out = OracleComparison::default();
    for &n in sizes {
        let marg = Marginals::uniform(n, n, n as f64).unwrap();
        for _ in 0..count {
            let cost = uniform(&[n, n], 0.0, 1.0, &mut r);
            let exact = exact_matching_oracle(&cost, &marg).unwrap();
            if (exact.cost - brute_force_assignment_cost(&cost)).abs() > 1e-9 {
                out.oracle_mismatches += 1;
            }
            let plan = sinkhorn_solve(&cost, &marg, cfg).unwrap().plan;
            let value = transport_cost(&plan, &cost);
            out.worst_gap = out.worst_gap.max((value - exact.cost) / exact.cost);
            out.worst_row = out.worst_row.max(row_violation(&plan, marg.a()));
            out.worst_col = out.worst_col.max(col_violation(&plan, marg.b()));
            out.instances += 1;
        }
    }
    out
}
