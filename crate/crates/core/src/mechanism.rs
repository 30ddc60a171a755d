//! Auction mechanisms: valuation profiles, allocations, payments, and the
//! learned Sinkhorn mechanism.
//!
//! The learned mechanism feeds the flattened bid matrix to two networks. The
//! allocation network's raw output is the `n x m` cost block of a transport
//! problem whose dummy row and column cost 0; the Sinkhorn plan, truncated
//! back to `n x m`, is the allocation. The payment network ends in a sigmoid
//! and charges each bidder that fraction of the reported value of what they
//! won, which makes truthful participation individually rational.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{mlp_forward, Activation, Mlp, MlpVars};
use crate::tensor::Tensor;
use crate::transport::{sinkhorn_solve_graph, DemandKind, DemandSpec, Marginals, SinkhornConfig};

/// Hidden layer widths used by both networks.
pub const HIDDEN: [usize; 2] = [128, 128];

/// An `n x m` matrix of per-bidder per-item values; also used for bids.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationProfile {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl ValuationProfile {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return dim_err("profile", format!("{}x{} needs {} values, got {}", n, m, n * m, values.len()));
        }
        Ok(Self { n, m, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        Self::new(t.shape()[0], t.shape()[1], t.into_data())
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Self {
        Self {
            n,
            m,
            values: (0..n * m).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn bidders(&self) -> usize {
        self.n
    }

    pub fn items(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Copy with bidder `i`'s row replaced by `report`.
    pub fn with_report(&self, i: usize, report: &[f64]) -> Self {
        let mut out = self.clone();
        out.values[i * self.m..(i + 1) * self.m].copy_from_slice(report);
        out
    }

    pub fn in_support(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Allocation probabilities `g[i][j]` of item `j` to bidder `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    n: usize,
    m: usize,
    probs: Vec<f64>,
}

impl Allocation {
    pub fn new(n: usize, m: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * m {
            return dim_err("allocation", format!("{}x{} vs {} values", n, m, probs.len()));
        }
        Ok(Self { n, m, probs })
    }

    pub fn empty(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            probs: vec![0.0; n * m],
        }
    }

    pub fn bidders(&self) -> usize {
        self.n
    }

    pub fn items(&self) -> usize {
        self.m
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: f64) {
        self.probs[i * self.m + j] = p;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.m..(i + 1) * self.m]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    /// Checks row sums against the demand type and column sums against unit
    /// supply, with the slack implied by a relative row tolerance `tol`.
    pub fn is_feasible(&self, demand: &DemandSpec, tol: f64) -> bool {
        let k = demand.k as f64;
        let rows_ok = (0..self.n).all(|i| {
            let s = self.row_sum(i);
            match demand.kind {
                DemandKind::KDemand => s <= k + k * tol,
                DemandKind::ExactlyK => (s - k).abs() <= k * tol,
            }
        });
        let cols_ok = (0..self.m).all(|j| self.col_sum(j) <= 1.0 + 2.0 * tol);
        let range_ok = self.probs.iter().all(|&p| (0.0..=1.0 + tol).contains(&p));
        rows_ok && cols_ok && range_ok
    }
}

/// Per-bidder charges.
#[derive(Clone, Debug, PartialEq)]
pub struct Payments(pub Vec<f64>);

impl Payments {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub allocation: Allocation,
    pub payments: Payments,
}

/// Quasilinear utility `<v, g> - p`.
pub fn utility(values: &[f64], alloc_row: &[f64], payment: f64) -> f64 {
    values.iter().zip(alloc_row).map(|(v, g)| v * g).sum::<f64>() - payment
}

/// Mean total payment over a batch.
pub fn revenue(payments: &[Payments]) -> Result<f64> {
    if payments.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(payments.iter().map(Payments::total).sum::<f64>() / payments.len() as f64)
}

/// Utility of each bidder under truthful bidding.
pub fn truthful_utilities(truth: &ValuationProfile, outcome: &Outcome) -> Vec<f64> {
    (0..truth.bidders())
        .map(|i| utility(truth.row(i), outcome.allocation.row(i), outcome.payments.0[i]))
        .collect()
}

/// Batched misreport evaluation. For profile `b` and bidder `i`, bidder `i`
/// alone reports `reports[b, i, :]` while everyone else bids truthfully.
#[derive(Clone, Debug)]
pub struct MisreportEval {
    /// `[batch, n]` utilities, valued at the true valuations.
    pub utilities: Tensor,
    /// `[batch, n, m]` gradient of each utility w.r.t. its own report.
    pub gradients: Option<Tensor>,
}

/// A direct-revelation mechanism over `n` bidders and `m` items.
pub trait Mechanism: Sync {
    fn bidders(&self) -> usize;
    fn items(&self) -> usize;

    fn outcomes(&self, bids: &[ValuationProfile]) -> Result<Vec<Outcome>>;

    fn misreport_utilities(
        &self,
        truth: &[ValuationProfile],
        reports: &Tensor,
        with_gradient: bool,
    ) -> Result<MisreportEval> {
        misreport_utilities_by_outcomes(self, truth, reports, with_gradient)
    }
}

/// Misreport evaluation for mechanisms that are piecewise constant in the
/// bids, whose report gradient is zero almost everywhere.
pub fn misreport_utilities_by_outcomes<M: Mechanism + ?Sized>(
    mech: &M,
    truth: &[ValuationProfile],
    reports: &Tensor,
    with_gradient: bool,
) -> Result<MisreportEval> {
    let (n, m) = (mech.bidders(), mech.items());
    check_reports(truth, reports, n, m)?;
    let copies = misreport_profiles(truth, reports);
    let outs = mech.outcomes(&copies)?;
    let utilities = outs
        .iter()
        .enumerate()
        .map(|(c, o)| {
            let (b, i) = (c / n, c % n);
            utility(truth[b].row(i), o.allocation.row(i), o.payments.0[i])
        })
        .collect();
    Ok(MisreportEval {
        utilities: Tensor::new(vec![truth.len(), n], utilities)?,
        gradients: with_gradient.then(|| Tensor::zeros(reports.shape())),
    })
}

fn check_reports(truth: &[ValuationProfile], reports: &Tensor, n: usize, m: usize) -> Result<()> {
    if reports.shape() != [truth.len(), n, m] {
        return dim_err("misreport", format!("reports {:?} for {} profiles of {}x{}", reports.shape(), truth.len(), n, m));
    }
    if truth.iter().any(|p| p.bidders() != n || p.items() != m) {
        return dim_err("misreport", format!("profile shape differs from mechanism {}x{}", n, m));
    }
    Ok(())
}

/// Expands each profile into `n` copies; copy `b * n + i` has bidder `i`'s
/// row replaced by `reports[b, i, :]`.
pub fn misreport_profiles(truth: &[ValuationProfile], reports: &Tensor) -> Vec<ValuationProfile> {
    let mut out = Vec::with_capacity(truth.len() * reports.shape()[1]);
    for (b, p) in truth.iter().enumerate() {
        let (n, m) = (p.bidders(), p.items());
        for i in 0..n {
            let start = (b * n + i) * m;
            out.push(p.with_report(i, &reports.data()[start..start + m]));
        }
    }
    out
}

pub fn profiles_to_tensor(bids: &[ValuationProfile]) -> Result<Tensor> {
    let Some(first) = bids.first() else {
        return Err(Error::EmptyBatch);
    };
    let width = first.values().len();
    if bids.iter().any(|p| p.values().len() != width) {
        return dim_err("profiles", "mixed profile shapes in batch");
    }
    let data = bids.iter().flat_map(|p| p.values().iter().copied()).collect();
    Tensor::new(vec![bids.len(), width], data)
}

/// How the allocation network's output becomes an allocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocationHead {
    /// Cost matrix for the Sinkhorn matching layer.
    Sinkhorn,
    /// Min of a row-wise and a column-wise softmax (unit demand only).
    MinSoftmax,
}

/// `min(rowsoftmax(row_scores)[.., :m], colsoftmax(col_scores)[:n, ..])`.
///
/// Accepts `[n, m+1]` / `[n+1, m]` score matrices or batched
/// `[B, n, m+1]` / `[B, n+1, m]`.
pub fn regretnet_unit_head(g: &mut Graph, row_scores: Var, col_scores: Var) -> Result<Var> {
    let rs = g.shape(row_scores).to_vec();
    let cs = g.shape(col_scores).to_vec();
    let rank = rs.len();
    if rank < 2 || cs.len() != rank || rs[rank - 2] + 1 != cs[rank - 2] || rs[rank - 1] != cs[rank - 1] + 1 {
        return dim_err("regretnet_unit_head", format!("{:?} vs {:?}", rs, cs));
    }
    let (n, m) = (rs[rank - 2], cs[rank - 1]);
    let row_soft = g.softmax(row_scores, rank - 1)?;
    let row_soft = g.select(row_soft, rank - 1, &(0..m).collect::<Vec<_>>())?;
    let col_soft = g.softmax(col_scores, rank - 2)?;
    let col_soft = g.select(col_soft, rank - 2, &(0..n).collect::<Vec<_>>())?;
    g.minimum(row_soft, col_soft)
}

/// Parameters of a learned mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismParams {
    pub alloc_net: Mlp,
    pub pay_net: Mlp,
    pub demand: DemandSpec,
    pub sinkhorn: SinkhornConfig,
    pub head: AllocationHead,
}

/// Graph handles for a bound [`MechanismParams`].
#[derive(Clone, Debug)]
pub struct MechanismVars {
    pub alloc: MlpVars,
    pub pay: MlpVars,
}

impl MechanismVars {
    pub fn parameters(&self) -> impl Iterator<Item = Var> + '_ {
        self.alloc.parameters().chain(self.pay.parameters())
    }
}

/// Graph outputs of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutcome {
    /// `[batch, n, m]`
    pub allocation: Var,
    /// `[batch, n]`
    pub payments: Var,
}

fn alloc_output_dim(head: AllocationHead, n: usize, m: usize) -> usize {
    match head {
        AllocationHead::Sinkhorn => n * m,
        AllocationHead::MinSoftmax => n * (m + 1) + (n + 1) * m,
    }
}

impl MechanismParams {
    /// Randomly initialised networks for `demand`.
    pub fn init<R: Rng + ?Sized>(
        demand: DemandSpec,
        sinkhorn: SinkhornConfig,
        head: AllocationHead,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_head(head, &demand)?;
        let (n, m) = (demand.n, demand.m);
        let alloc = [n * m, HIDDEN[0], HIDDEN[1], alloc_output_dim(head, n, m)];
        let pay = [n * m, HIDDEN[0], HIDDEN[1], n];
        Ok(Self {
            alloc_net: Mlp::init(&alloc, Activation::Tanh, rng),
            pay_net: Mlp::init(&pay, Activation::Tanh, rng),
            demand,
            sinkhorn,
            head,
        })
    }

    fn check_head(head: AllocationHead, demand: &DemandSpec) -> Result<()> {
        demand.validate()?;
        if head == AllocationHead::MinSoftmax && !(demand.kind == DemandKind::KDemand && demand.k == 1) {
            return Err(Error::InfeasibleSpec(
                "min-of-softmax head only represents unit demand".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_head(self.head, &self.demand)?;
        self.sinkhorn.validate()?;
        self.alloc_net.validate()?;
        self.pay_net.validate()?;
        let (n, m) = (self.demand.n, self.demand.m);
        if self.alloc_net.input_dim() != n * m || self.alloc_net.output_dim() != alloc_output_dim(self.head, n, m) {
            return dim_err("mechanism", "allocation network does not match demand shape");
        }
        if self.pay_net.input_dim() != n * m || self.pay_net.output_dim() != n {
            return dim_err("mechanism", "payment network does not match demand shape");
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MechanismVars {
        MechanismVars {
            alloc: self.alloc_net.bind(g, trainable),
            pay: self.pay_net.bind(g, trainable),
        }
    }

    /// Trainable tensors in the order of [`MechanismVars::parameters`].
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.alloc_net.parameters().chain(self.pay_net.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.alloc_net.parameters_mut().chain(self.pay_net.parameters_mut())
    }

    /// Allocation and payments for a `[batch, n*m]` bid tensor on `g`.
    pub fn forward(&self, g: &mut Graph, vars: &MechanismVars, bids: Var) -> Result<GraphOutcome> {
        let (n, m) = (self.demand.n, self.demand.m);
        let shape = g.shape(bids).to_vec();
        if shape.len() != 2 || shape[1] != n * m {
            return dim_err("allocate", format!("bids {:?} for {}x{} mechanism", shape, n, m));
        }
        let batch = shape[0];
        let raw = mlp_forward(g, &vars.alloc, bids)?;
        let allocation = match self.head {
            AllocationHead::Sinkhorn => {
                let cost = g.reshape(raw, &[batch, n, m])?;
                let cost = g.scatter(cost, 2, &(0..m).collect::<Vec<_>>(), m + 1)?;
                let cost = g.scatter(cost, 1, &(0..n).collect::<Vec<_>>(), n + 1)?;
                let marg = Marginals::for_demand(&self.demand)?;
                let plan = sinkhorn_solve_graph(g, cost, &marg, &self.sinkhorn)?.plan;
                let plan = g.select(plan, 1, &(0..n).collect::<Vec<_>>())?;
                g.select(plan, 2, &(0..m).collect::<Vec<_>>())?
            }
            AllocationHead::MinSoftmax => {
                let split = n * (m + 1);
                let rows = g.select(raw, 1, &(0..split).collect::<Vec<_>>())?;
                let cols = g.select(raw, 1, &(split..split + (n + 1) * m).collect::<Vec<_>>())?;
                let rows = g.reshape(rows, &[batch, n, m + 1])?;
                let cols = g.reshape(cols, &[batch, n + 1, m])?;
                regretnet_unit_head(g, rows, cols)?
            }
        };
        let frac = mlp_forward(g, &vars.pay, bids)?;
        let frac = g.sigmoid(frac);
        let bids3 = g.reshape(bids, &[batch, n, m])?;
        let won = g.mul(bids3, allocation)?;
        let won = g.sum_axis(won, 2)?;
        let payments = g.mul(won, frac)?;
        Ok(GraphOutcome {
            allocation,
            payments,
        })
    }

    /// Utilities `[batch, n]` on `g` for the copies built by
    /// [`misreport_profiles`], valued at the true profiles.
    pub fn copy_utilities(
        &self,
        g: &mut Graph,
        outcome: &GraphOutcome,
        truth: &[ValuationProfile],
    ) -> Result<Var> {
        let (n, m) = (self.demand.n, self.demand.m);
        let copies = truth.len() * n;
        let mut mask = vec![0.0; copies * n * m];
        let mut pick = vec![0.0; copies * n];
        for (b, p) in truth.iter().enumerate() {
            for i in 0..n {
                let c = b * n + i;
                mask[(c * n + i) * m..(c * n + i + 1) * m].copy_from_slice(p.row(i));
                pick[c * n + i] = 1.0;
            }
        }
        let mask = g.constant(Tensor::new(vec![copies, n, m], mask)?);
        let pick = g.constant(Tensor::new(vec![copies, n], pick)?);
        let value = g.mul(outcome.allocation, mask)?;
        let value = g.sum_axis(value, 2)?;
        let value = g.sum_axis(value, 1)?;
        let paid = g.mul(outcome.payments, pick)?;
        let paid = g.sum_axis(paid, 1)?;
        let u = g.sub(value, paid)?;
        g.reshape(u, &[truth.len(), n])
    }

    /// Utility of each bidder under truthful bidding, on `g`.
    pub fn truthful_utilities_graph(
        &self,
        g: &mut Graph,
        outcome: &GraphOutcome,
        truth: Var,
    ) -> Result<Var> {
        let (n, m) = (self.demand.n, self.demand.m);
        let batch = g.shape(truth)[0];
        let t3 = g.reshape(truth, &[batch, n, m])?;
        let value = g.mul(outcome.allocation, t3)?;
        let value = g.sum_axis(value, 2)?;
        g.sub(value, outcome.payments)
    }

    pub fn allocate(&self, bids: &ValuationProfile) -> Result<Allocation> {
        Ok(self.outcomes(std::slice::from_ref(bids))?.remove(0).allocation)
    }

    /// Utility gain for bidder `i` from reporting `report` instead of the
    /// truth, everyone else truthful.
    pub fn regret_of_misreport(&self, truth: &ValuationProfile, i: usize, report: &[f64]) -> Result<f64> {
        regret_of_misreport(self, truth, i, report)
    }
}

impl Mechanism for MechanismParams {
    fn bidders(&self) -> usize {
        self.demand.n
    }

    fn items(&self) -> usize {
        self.demand.m
    }

    fn outcomes(&self, bids: &[ValuationProfile]) -> Result<Vec<Outcome>> {
        let (n, m) = (self.demand.n, self.demand.m);
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(profiles_to_tensor(bids)?);
        let out = self.forward(&mut g, &vars, x)?;
        let alloc = g.value(out.allocation).data();
        let pay = g.value(out.payments).data();
        (0..bids.len())
            .map(|b| {
                Ok(Outcome {
                    allocation: Allocation::new(n, m, alloc[b * n * m..(b + 1) * n * m].to_vec())?,
                    payments: Payments(pay[b * n..(b + 1) * n].to_vec()),
                })
            })
            .collect()
    }

    fn misreport_utilities(
        &self,
        truth: &[ValuationProfile],
        reports: &Tensor,
        with_gradient: bool,
    ) -> Result<MisreportEval> {
        let (n, m) = (self.demand.n, self.demand.m);
        check_reports(truth, reports, n, m)?;
        let copies = misreport_profiles(truth, reports);
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let bids = profiles_to_tensor(&copies)?;
        let x = if with_gradient { g.leaf(bids) } else { g.constant(bids) };
        let out = self.forward(&mut g, &vars, x)?;
        let u = self.copy_utilities(&mut g, &out, truth)?;
        let utilities = g.value(u).clone();
        let gradients = if with_gradient {
            let total = g.sum(u);
            let grads = g.backward(total)?;
            let gx = grads.wrt(x);
            let mut own = vec![0.0; truth.len() * n * m];
            for c in 0..truth.len() * n {
                let i = c % n;
                let src = c * n * m + i * m;
                own[c * m..(c + 1) * m].copy_from_slice(&gx.data()[src..src + m]);
            }
            Some(Tensor::new(vec![truth.len(), n, m], own)?)
        } else {
            None
        };
        Ok(MisreportEval {
            utilities,
            gradients,
        })
    }
}

/// Utility gain for bidder `i` from reporting `report`, valued at the truth.
pub fn regret_of_misreport<M: Mechanism + ?Sized>(
    mech: &M,
    truth: &ValuationProfile,
    i: usize,
    report: &[f64],
) -> Result<f64> {
    if i >= truth.bidders() || report.len() != truth.items() {
        return dim_err("regret_of_misreport", format!("bidder {} report len {}", i, report.len()));
    }
    let outs = mech.outcomes(&[truth.clone(), truth.with_report(i, report)])?;
    let honest = utility(truth.row(i), outs[0].allocation.row(i), outs[0].payments.0[i]);
    let lying = utility(truth.row(i), outs[1].allocation.row(i), outs[1].payments.0[i]);
    Ok(lying - honest)
}
