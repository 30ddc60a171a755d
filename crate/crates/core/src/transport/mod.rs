//! Demand marginals, entropic matching via log-domain Sinkhorn, and an
//! exact min-cost-flow oracle for the unregularized matching problem.
//!
//! The transport problem is posed over `(n + 1) x (m + 1)` cells: bidders
//! plus one dummy agent against items plus one dummy item. Demand types are
//! expressed entirely through the row masses `a` and column masses `b`.

mod exact;
mod sinkhorn;

pub use exact::{exact_matching_oracle, ExactPlan, ORACLE_LIMIT};
pub use sinkhorn::{
    entropic_objective, geometric_schedule, linear_schedule, plan_from_potentials,
    row_violation, sinkhorn_solve, sinkhorn_solve_graph, GraphPlan, SinkhornConfig,
    TransportPlan,
};

use crate::error::{Error, Result};

/// Relative mass imbalance tolerated between `sum(a)` and `sum(b)`.
const BALANCE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DemandKind {
    /// At most `k` items per bidder (unit demand when `k == 1`).
    KDemand,
    /// Exactly `k` items per bidder; no free disposal.
    ExactlyK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DemandSpec {
    pub kind: DemandKind,
    pub k: usize,
    pub n: usize,
    pub m: usize,
}

impl DemandSpec {
    pub fn unit_demand(n: usize, m: usize) -> Self {
        Self {
            kind: DemandKind::KDemand,
            k: 1,
            n,
            m,
        }
    }

    pub fn exactly_one(n: usize, m: usize) -> Self {
        Self {
            kind: DemandKind::ExactlyK,
            k: 1,
            n,
            m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.m == 0 {
            return Err(Error::InfeasibleSpec(format!(
                "k, n and m must be positive (k={}, n={}, m={})",
                self.k, self.n, self.m
            )));
        }
        if self.kind == DemandKind::ExactlyK && self.m < self.k * self.n {
            return Err(Error::InfeasibleSpec(format!(
                "exactly-{} demand for {} bidders needs at least {} items, have {}",
                self.k,
                self.n,
                self.k * self.n,
                self.m
            )));
        }
        Ok(())
    }
}

/// Row masses `a` (bidders, then dummy agent) and column masses `b`
/// (items, then dummy item).
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Marginals {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Contract("marginals must be non-empty".into()));
        }
        if a.iter().chain(&b).any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Contract("marginal masses must be finite and >= 0".into()));
        }
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        if (sa - sb).abs() > BALANCE_TOL * sa.max(sb).max(1.0) {
            return Err(Error::Contract(format!(
                "unbalanced marginals: sum(a)={} sum(b)={}",
                sa, sb
            )));
        }
        if sa <= 0.0 {
            return Err(Error::Contract("marginals carry no mass".into()));
        }
        Ok(Self { a, b })
    }

    /// Masses encoding `spec`, dummy entries last.
    pub fn for_demand(spec: &DemandSpec) -> Result<Self> {
        spec.validate()?;
        let (k, n, m) = (spec.k as f64, spec.n, spec.m as f64);
        let mut a = vec![k; n];
        let mut b = vec![1.0; spec.m];
        match spec.kind {
            DemandKind::KDemand => {
                a.push(m);
                b.push(k * n as f64);
            }
            DemandKind::ExactlyK => {
                a.push(m - k * n as f64);
                b.push(0.0);
            }
        }
        Self::new(a, b)
    }

    pub fn uniform(rows: usize, cols: usize, total: f64) -> Result<Self> {
        Self::new(
            vec![total / rows as f64; rows],
            vec![total / cols as f64; cols],
        )
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub(crate) fn active_rows(&self) -> Vec<usize> {
        (0..self.a.len()).filter(|&i| self.a[i] > 0.0).collect()
    }

    pub(crate) fn active_cols(&self) -> Vec<usize> {
        (0..self.b.len()).filter(|&j| self.b[j] > 0.0).collect()
    }
}

/// Alias kept for call sites that read better as a free function.
pub fn build_marginals(spec: &DemandSpec) -> Result<Marginals> {
    Marginals::for_demand(spec)
}
