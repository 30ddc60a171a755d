//! Test-time measurement, baseline mechanisms and allocation heatmaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::mechanism::{
    Allocation, Mechanism, MechanismParams, Outcome, Payments, ValuationProfile,
};
use crate::tensor::Tensor;
use crate::training::{misreport_ascent, misreport_ascent_from, sample_valuations};
use crate::transport::{exact_matching_oracle, DemandKind, DemandSpec, Marginals, ORACLE_LIMIT};

/// Price of each item in the optimal single-bidder unit-demand menu.
pub const UNIT_DEMAND_PRICE: f64 = 0.577_350_269_189_625_8;
/// Price of the non-free item in the optimal exactly-one menu.
pub const EXACTLY_ONE_PRICE: f64 = 1.0 / 3.0;

/// A single-bidder menu of item prices. The bidder takes the item with the
/// largest surplus `v_j - price_j`, ties going to the lower index. Unless
/// `must_buy` is set, nothing is bought when every surplus is negative.
#[derive(Clone, Debug, PartialEq)]
pub struct PostedPrices {
    prices: Vec<f64>,
    must_buy: bool,
}

impl PostedPrices {
    pub fn new(prices: Vec<f64>, must_buy: bool) -> Result<Self> {
        if prices.is_empty() || prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("posted prices must be finite and nonnegative".into()));
        }
        Ok(Self { prices, must_buy })
    }

    /// Both items at `sqrt(3)/3`, buying is optional.
    pub fn unit_demand_optimal() -> Self {
        Self {
            prices: vec![UNIT_DEMAND_PRICE; 2],
            must_buy: false,
        }
    }

    /// Item 1 free, item 2 at `1/3`, exactly one item is taken.
    pub fn exactly_one_optimal() -> Self {
        Self {
            prices: vec![0.0, EXACTLY_ONE_PRICE],
            must_buy: true,
        }
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    /// Chosen item and price paid.
    pub fn choose(&self, values: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (j, (v, p)) in values.iter().zip(&self.prices).enumerate() {
            let surplus = v - p;
            if best.is_none_or(|(_, s)| surplus > s) {
                best = Some((j, surplus));
            }
        }
        let (j, surplus) = best?;
        (self.must_buy || surplus >= 0.0).then(|| (j, self.prices[j]))
    }

    fn outcome(&self, bid: &ValuationProfile) -> Result<Outcome> {
        if bid.bidders() != 1 || bid.items() != self.prices.len() {
            return dim_err(
                "posted_prices",
                format!("{}x{} profile for a 1x{} menu", bid.bidders(), bid.items(), self.prices.len()),
            );
        }
        let mut allocation = Allocation::empty(1, self.prices.len());
        let mut pay = 0.0;
        if let Some((j, price)) = self.choose(bid.row(0)) {
            allocation.set(0, j, 1.0);
            pay = price;
        }
        Ok(Outcome {
            allocation,
            payments: Payments(vec![pay]),
        })
    }
}

impl Mechanism for PostedPrices {
    fn bidders(&self) -> usize {
        1
    }

    fn items(&self) -> usize {
        self.prices.len()
    }

    fn outcomes(&self, bids: &[ValuationProfile]) -> Result<Vec<Outcome>> {
        bids.iter().map(|b| self.outcome(b)).collect()
    }
}

/// Welfare-maximizing allocation with Clarke payments, clamped at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Vcg {
    demand: DemandSpec,
}

impl Vcg {
    pub fn new(demand: DemandSpec) -> Result<Self> {
        demand.validate()?;
        let size = demand.n + demand.m + 2;
        if size > ORACLE_LIMIT {
            return Err(Error::OracleScale {
                rows: demand.n + 1,
                cols: demand.m + 1,
                limit: ORACLE_LIMIT,
            });
        }
        Ok(Self { demand })
    }

    pub fn demand(&self) -> &DemandSpec {
        &self.demand
    }

    /// Optimal allocation for `rows` (bidder value rows) under `demand`.
    fn best_matching(demand: &DemandSpec, rows: &[&[f64]]) -> Result<(Allocation, f64)> {
        let (n, m) = (demand.n, demand.m);
        if n == 0 {
            return Ok((Allocation::empty(0, m), 0.0));
        }
        let mut cost = Tensor::zeros(&[n + 1, m + 1]);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                cost.data_mut()[i * (m + 1) + j] = -v;
            }
        }
        let marg = Marginals::for_demand(demand)?;
        let exact = exact_matching_oracle(&cost, &marg)?;
        let mut alloc = Allocation::empty(n, m);
        for i in 0..n {
            for j in 0..m {
                alloc.set(i, j, exact.plan.at2(i, j).round());
            }
        }
        Ok((alloc, -exact.cost))
    }

    pub fn outcome(&self, bid: &ValuationProfile) -> Result<Outcome> {
        let (n, m) = (self.demand.n, self.demand.m);
        if bid.bidders() != n || bid.items() != m {
            return dim_err("vcg", format!("{}x{} profile for {}x{} demand", bid.bidders(), bid.items(), n, m));
        }
        let rows: Vec<&[f64]> = (0..n).map(|i| bid.row(i)).collect();
        let (allocation, _) = Self::best_matching(&self.demand, &rows)?;
        let won: Vec<f64> = (0..n)
            .map(|i| rows[i].iter().zip(allocation.row(i)).map(|(v, g)| v * g).sum())
            .collect();
        let total: f64 = won.iter().sum();
        let sub = DemandSpec { n: n - 1, ..self.demand };
        let mut payments = Vec::with_capacity(n);
        for i in 0..n {
            let others: Vec<&[f64]> = (0..n).filter(|&k| k != i).map(|k| rows[k]).collect();
            let (_, without) = Self::best_matching(&sub, &others)?;
            payments.push((without - (total - won[i])).max(0.0));
        }
        Ok(Outcome {
            allocation,
            payments: Payments(payments),
        })
    }
}

impl Mechanism for Vcg {
    fn bidders(&self) -> usize {
        self.demand.n
    }

    fn items(&self) -> usize {
        self.demand.m
    }

    fn outcomes(&self, bids: &[ValuationProfile]) -> Result<Vec<Outcome>> {
        bids.iter().map(|b| self.outcome(b)).collect()
    }
}

/// VCG outcome for one profile under `demand`.
pub fn vcg_outcome(demand: DemandSpec, bid: &ValuationProfile) -> Result<Outcome> {
    Vcg::new(demand)?.outcome(bid)
}

/// Mean total payment over `profiles`.
pub fn mean_revenue<M: Mechanism + ?Sized>(mech: &M, profiles: &[ValuationProfile]) -> Result<f64> {
    Ok(revenue_stats(mech, profiles)?.0)
}

fn revenue_stats<M: Mechanism + ?Sized>(mech: &M, profiles: &[ValuationProfile]) -> Result<(f64, f64)> {
    if profiles.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut totals = Vec::with_capacity(profiles.len());
    for chunk in profiles.chunks(EVAL_CHUNK) {
        totals.extend(mech.outcomes(chunk)?.iter().map(|o| o.payments.total()));
    }
    Ok(mean_std(&totals))
}

const EVAL_CHUNK: usize = 1024;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretConfig {
    pub iters: usize,
    pub restarts: usize,
    pub lr: f64,
    pub seed: u64,
    /// Worker threads; results are identical for any value.
    pub threads: usize,
}

impl Default for RegretConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            restarts: 10,
            lr: 0.1,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretStats {
    /// Mean over bidders of each bidder's mean regret.
    pub mean: f64,
    /// Standard deviation over all profile-bidder entries.
    pub std: f64,
    pub per_bidder: Vec<f64>,
    /// `[profiles, n]` regret of every profile and bidder.
    pub values: Tensor,
}

/// High-effort regret: per profile and bidder, the best of an ascent from
/// the truthful report and `restarts` ascents from uniform random reports.
pub fn test_regret<M: Mechanism + ?Sized>(
    mech: &M,
    test_set: &[ValuationProfile],
    cfg: &RegretConfig,
) -> Result<RegretStats> {
    if test_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = mech.bidders();
    let chunks: Vec<(usize, &[ValuationProfile])> = test_set.chunks(REGRET_CHUNK).enumerate().collect();
    let threads = cfg.threads.max(1).min(chunks.len());
    let mut parts: Vec<Result<Vec<f64>>> = Vec::with_capacity(chunks.len());
    if threads <= 1 {
        parts.extend(chunks.iter().map(|&(k, c)| chunk_regret(mech, c, k, cfg)));
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let mine: Vec<(usize, &[ValuationProfile])> =
                        chunks.iter().copied().skip(t).step_by(threads).collect();
                    scope.spawn(move || {
                        mine.into_iter()
                            .map(|(k, c)| (k, chunk_regret(mech, c, k, cfg)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut done: Vec<(usize, Result<Vec<f64>>)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("regret worker panicked"))
                .collect();
            done.sort_by_key(|(k, _)| *k);
            parts.extend(done.into_iter().map(|(_, r)| r));
        });
    }
    let mut values = Vec::with_capacity(test_set.len() * n);
    for part in parts {
        values.extend(part?);
    }
    let count = test_set.len();
    let per_bidder: Vec<f64> = (0..n)
        .map(|i| values.iter().skip(i).step_by(n).sum::<f64>() / count as f64)
        .collect();
    let (_, std) = mean_std(&values);
    Ok(RegretStats {
        mean: per_bidder.iter().sum::<f64>() / n as f64,
        std,
        per_bidder,
        values: Tensor::new(vec![count, n], values)?,
    })
}

/// Regret of one chunk. Restart points come from a stream keyed by the
/// chunk index, so results do not depend on the thread count.
fn chunk_regret<M: Mechanism + ?Sized>(
    mech: &M,
    chunk: &[ValuationProfile],
    index: usize,
    cfg: &RegretConfig,
) -> Result<Vec<f64>> {
    let (n, m) = (mech.bidders(), mech.items());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let base = misreport_ascent(mech, chunk, cfg.iters, cfg.lr)?;
    let mut best = base.regrets.clone();
    for _ in 0..cfg.restarts {
        let start: Vec<f64> = (0..chunk.len() * n * m).map(|_| rng.gen::<f64>()).collect();
        let start = Tensor::new(vec![chunk.len(), n, m], start)?;
        let run = misreport_ascent_from(mech, chunk, start, &base.truthful, cfg.iters, cfg.lr)?;
        for (b, r) in best.data_mut().iter_mut().zip(run.regrets.data()) {
            *b = b.max(*r);
        }
    }
    Ok(best.into_data())
}

const REGRET_CHUNK: usize = 250;

/// Allocation and payment of a single bidder over a grid on `[0,1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    resolution: usize,
    /// `[resolution^2, 2]`, row `a * resolution + b` is the bid `(x_a, x_b)`.
    alloc: Vec<[f64; 2]>,
    payments: Vec<f64>,
}

pub const DEFAULT_RESOLUTION: usize = 101;

impl HeatmapGrid {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    pub fn coordinate(&self, a: usize) -> f64 {
        a as f64 * self.spacing()
    }

    /// Cell for `v1 = x_a`, `v2 = x_b`.
    pub fn allocation(&self, a: usize, b: usize) -> [f64; 2] {
        self.alloc[a * self.resolution + b]
    }

    pub fn payment(&self, a: usize, b: usize) -> f64 {
        self.payments[a * self.resolution + b]
    }

    /// `(v1, v2, g1, g2, payment)` rows in grid order.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64, f64, f64)> + '_ {
        let r = self.resolution;
        (0..r * r).map(move |c| {
            let (a, b) = (c / r, c % r);
            let g = self.alloc[c];
            (self.coordinate(a), self.coordinate(b), g[0], g[1], self.payments[c])
        })
    }

    /// Largest change of any item's allocation between neighbouring cells,
    /// divided by the grid spacing.
    pub fn max_gradient(&self) -> f64 {
        let r = self.resolution;
        let mut worst: f64 = 0.0;
        for a in 0..r {
            for b in 0..r {
                let here = self.allocation(a, b);
                let mut nbrs = Vec::with_capacity(2);
                if a + 1 < r {
                    nbrs.push(self.allocation(a + 1, b));
                }
                if b + 1 < r {
                    nbrs.push(self.allocation(a, b + 1));
                }
                for nb in nbrs {
                    for j in 0..2 {
                        worst = worst.max((here[j] - nb[j]).abs());
                    }
                }
            }
        }
        worst / self.spacing()
    }

    /// Fraction of cells at distance greater than `margin` from a reference
    /// boundary whose dominant choice matches `reference`. Returns the
    /// fraction and the number of cells considered.
    pub fn agreement<M: Mechanism + ?Sized>(
        &self,
        reference: &M,
        distance: impl Fn(f64, f64) -> f64,
        margin: f64,
    ) -> Result<(f64, usize)> {
        let reference = heatmap_grid(reference, self.resolution)?;
        let (mut hits, mut total) = (0usize, 0usize);
        for (c, (v1, v2, ..)) in self.rows().enumerate() {
            if distance(v1, v2) <= margin {
                continue;
            }
            total += 1;
            if dominant_choice(self.alloc[c]) == dominant_choice(reference.alloc[c]) {
                hits += 1;
            }
        }
        if total == 0 {
            return Err(Error::Contract("no grid cell lies outside the margin".into()));
        }
        Ok((hits as f64 / total as f64, total))
    }
}

/// The item a bidder mostly receives, or `None` when the total allocation
/// is below one half.
pub fn dominant_choice(g: [f64; 2]) -> Option<usize> {
    if g[0] + g[1] < 0.5 {
        None
    } else if g[1] > g[0] {
        Some(1)
    } else {
        Some(0)
    }
}

/// Evaluates a single-bidder two-item mechanism on a grid.
pub fn heatmap_grid<M: Mechanism + ?Sized>(mech: &M, resolution: usize) -> Result<HeatmapGrid> {
    if mech.bidders() != 1 || mech.items() != 2 {
        return dim_err(
            "heatmap",
            format!("needs a 1x2 mechanism, got {}x{}", mech.bidders(), mech.items()),
        );
    }
    if resolution < 2 {
        return Err(Error::Config("heatmap resolution must be at least 2".into()));
    }
    let step = 1.0 / (resolution - 1) as f64;
    let mut profiles = Vec::with_capacity(resolution * resolution);
    for a in 0..resolution {
        for b in 0..resolution {
            profiles.push(ValuationProfile::new(1, 2, vec![a as f64 * step, b as f64 * step])?);
        }
    }
    let mut alloc = Vec::with_capacity(profiles.len());
    let mut payments = Vec::with_capacity(profiles.len());
    for chunk in profiles.chunks(EVAL_CHUNK) {
        for o in mech.outcomes(chunk)? {
            let row = o.allocation.row(0);
            alloc.push([row[0], row[1]]);
            payments.push(o.payments.0[0]);
        }
    }
    Ok(HeatmapGrid {
        resolution,
        alloc,
        payments,
    })
}

/// Euclidean distance to the line `v2 - v1 = 1/3`.
pub fn exactly_one_boundary_distance(v1: f64, v2: f64) -> f64 {
    (v2 - v1 - EXACTLY_ONE_PRICE).abs() / 2f64.sqrt()
}

/// Euclidean distance to the boundary of the unit-demand menu: the
/// segments `v1 = p, v2 <= p` and `v2 = p, v1 <= p` and the ray `v1 = v2 >= p`.
pub fn unit_demand_boundary_distance(v1: f64, v2: f64) -> f64 {
    let p = UNIT_DEMAND_PRICE;
    let seg = |x: f64, y: f64| -> f64 {
        // distance from (x, y) to {x = p, 0 <= y <= p}
        let dy = if y > p { y - p } else { 0.0 };
        ((x - p).powi(2) + dy * dy).sqrt()
    };
    let ray = {
        let t = ((v1 + v2) / 2.0).max(p);
        ((v1 - t).powi(2) + (v2 - t).powi(2)).sqrt()
    };
    seg(v1, v2).min(seg(v2, v1)).min(ray)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub test_size: usize,
    pub regret: RegretConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_size: 1000,
            regret: RegretConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub revenue_mean: f64,
    pub revenue_std: f64,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub regret_per_bidder: Vec<f64>,
    pub vcg_revenue: Option<f64>,
    pub optimal_revenue: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Known optimal mechanism for `demand`, if any.
pub fn analytic_optimum(demand: &DemandSpec) -> Option<PostedPrices> {
    if demand.n != 1 || demand.m != 2 || demand.k != 1 {
        return None;
    }
    Some(match demand.kind {
        DemandKind::KDemand => PostedPrices::unit_demand_optimal(),
        DemandKind::ExactlyK => PostedPrices::exactly_one_optimal(),
    })
}

/// Revenue, regret and baselines on a fresh test set drawn from `cfg.seed`.
pub fn evaluate(params: &MechanismParams, cfg: &EvalConfig) -> Result<EvalReport> {
    let demand = params.demand;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let test = sample_valuations(demand.n, demand.m, cfg.test_size, &mut rng);
    let (revenue_mean, revenue_std) = revenue_stats(params, &test)?;
    let regret = test_regret(params, &test, &cfg.regret)?;
    let vcg_revenue = match Vcg::new(demand) {
        Ok(v) if demand.k == 1 => Some(mean_revenue(&v, &test)?),
        _ => None,
    };
    let optimal_revenue = analytic_optimum(&demand)
        .map(|m| mean_revenue(&m, &test))
        .transpose()?;
    Ok(EvalReport {
        revenue_mean,
        revenue_std,
        regret_mean: regret.mean,
        regret_std: regret.std,
        regret_per_bidder: regret.per_bidder,
        vcg_revenue,
        optimal_revenue,
        samples: test.len(),
        seed: cfg.seed,
    })
}
