//! Augmented-Lagrangian training of a learned mechanism.
//!
//! Each batch: estimate every bidder's best misreport by gradient ascent on
//! their own bid, then descend on
//!
//! ```text
//! L = -sum_i mean(p_i) + sum_i lambda_i * rgt_i + rho / 2 * sum_i rgt_i^2
//! ```
//!
//! where `rgt_i` is bidder `i`'s mean empirical regret over the batch.
//! `rho` grows every `rho_period` batches and `lambda` takes a multiplier
//! step every `lambda_period` batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::mechanism::{
    misreport_profiles, profiles_to_tensor, AllocationHead, Mechanism, MechanismParams,
    ValuationProfile,
};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::transport::{DemandSpec, SinkhornConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub demand: DemandSpec,
    pub head: AllocationHead,
    pub train_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub misreport_steps: usize,
    pub misreport_lr: f64,
    pub rho_period: usize,
    pub lambda_period: usize,
    pub rho_increment: f64,
    pub rho_init: f64,
    pub lambda_init: f64,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale protocol: 2^19 profiles, batches of 4096, 100 epochs.
    pub fn full_scale(demand: DemandSpec) -> Self {
        Self {
            demand,
            head: AllocationHead::Sinkhorn,
            train_size: 1 << 19,
            batch_size: 4096,
            epochs: 100,
            lr: 1e-3,
            misreport_steps: 25,
            misreport_lr: 0.1,
            rho_period: 2,
            lambda_period: 100,
            rho_increment: 1.0,
            rho_init: 1.0,
            lambda_init: 5.0,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }

    /// Desk-scale protocol: 2^16 profiles, batches of 1024, 30 epochs.
    pub fn desk_scale(demand: DemandSpec) -> Self {
        Self {
            train_size: 1 << 16,
            batch_size: 1024,
            epochs: 30,
            ..Self::full_scale(demand)
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_size / self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        self.demand.validate()?;
        self.sinkhorn.validate()?;
        let positive = [
            ("train_size", self.train_size as f64),
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("lr", self.lr),
            ("misreport_lr", self.misreport_lr),
            ("rho_period", self.rho_period as f64),
            ("lambda_period", self.lambda_period as f64),
            ("rho_init", self.rho_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.rho_increment >= 0.0) || !(self.lambda_init >= 0.0) {
            return Err(Error::Config("rho_increment and lambda_init must be >= 0".into()));
        }
        if self.batch_size > self.train_size {
            return Err(Error::Config("batch_size exceeds train_size".into()));
        }
        Ok(())
    }
}

/// I.i.d. U[0,1] profiles.
pub fn sample_valuations<R: Rng + ?Sized>(n: usize, m: usize, count: usize, rng: &mut R) -> Vec<ValuationProfile> {
    (0..count).map(|_| ValuationProfile::sample(n, m, rng)).collect()
}

/// Result of a misreport search.
#[derive(Clone, Debug)]
pub struct AscentResult {
    /// `[batch, n, m]` best report found per profile and bidder.
    pub reports: Tensor,
    /// `[batch, n]` truthful utilities.
    pub truthful: Tensor,
    /// `[batch, n]` best utility found.
    pub best: Tensor,
    /// `[batch, n]` `max(0, best - truthful)`.
    pub regrets: Tensor,
}

impl AscentResult {
    /// Mean regret per bidder.
    pub fn mean_regret_per_bidder(&self) -> Vec<f64> {
        let (b, n) = (self.regrets.shape()[0], self.regrets.shape()[1]);
        (0..n)
            .map(|i| (0..b).map(|r| self.regrets.data()[r * n + i]).sum::<f64>() / b as f64)
            .collect()
    }
}

pub fn truthful_reports(truth: &[ValuationProfile]) -> Result<Tensor> {
    let Some(first) = truth.first() else {
        return Err(Error::EmptyBatch);
    };
    let t = profiles_to_tensor(truth)?;
    t.reshaped(vec![truth.len(), first.bidders(), first.items()])
}

/// Projected gradient ascent on each bidder's own report, starting from the
/// truthful bid. The best iterate is kept, so regrets are never negative.
pub fn misreport_ascent<M: Mechanism + ?Sized>(
    mech: &M,
    truth: &[ValuationProfile],
    steps: usize,
    lr: f64,
) -> Result<AscentResult> {
    let start = truthful_reports(truth)?;
    ascend(mech, truth, start, None, steps, lr)
}

/// Like [`misreport_ascent`] but from arbitrary starting reports, with the
/// truthful utilities supplied by the caller.
pub fn misreport_ascent_from<M: Mechanism + ?Sized>(
    mech: &M,
    truth: &[ValuationProfile],
    start: Tensor,
    truthful: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<AscentResult> {
    ascend(mech, truth, start, Some(truthful), steps, lr)
}

fn ascend<M: Mechanism + ?Sized>(
    mech: &M,
    truth: &[ValuationProfile],
    mut current: Tensor,
    truthful: Option<&Tensor>,
    steps: usize,
    lr: f64,
) -> Result<AscentResult> {
    // Without explicit truthful utilities, `current` must start at the truth.
    let (n, m) = (mech.bidders(), mech.items());
    if current.shape() != [truth.len(), n, m] {
        return dim_err("misreport_ascent", format!("start {:?}", current.shape()));
    }
    let mut best_reports = current.clone();
    let mut best: Option<Tensor> = None;
    let mut first: Option<Tensor> = None;
    for step in 0..=steps {
        let eval = mech.misreport_utilities(truth, &current, step < steps)?;
        match best.as_mut() {
            None => {
                first = Some(eval.utilities.clone());
                best = Some(eval.utilities.clone());
            }
            Some(b) => {
                for (k, (bv, &u)) in b.data_mut().iter_mut().zip(eval.utilities.data()).enumerate() {
                    if u > *bv {
                        *bv = u;
                        best_reports.data_mut()[k * m..(k + 1) * m]
                            .copy_from_slice(&current.data()[k * m..(k + 1) * m]);
                    }
                }
            }
        }
        if let Some(grad) = eval.gradients {
            if grad.max_abs() == 0.0 {
                break;
            }
            for (r, g) in current.data_mut().iter_mut().zip(grad.data()) {
                *r = (*r + lr * g).clamp(0.0, 1.0);
            }
        }
    }
    let best = best.expect("at least one evaluation");
    let truthful = truthful.cloned().unwrap_or_else(|| first.expect("at least one evaluation"));
    if truthful.shape() != best.shape() {
        return dim_err("misreport_ascent", "truthful utilities shape");
    }
    let regrets = Tensor::new(
        best.shape().to_vec(),
        best.data()
            .iter()
            .zip(truthful.data())
            .map(|(b, t)| (b - t).max(0.0))
            .collect(),
    )?;
    Ok(AscentResult {
        reports: best_reports,
        truthful,
        best,
        regrets,
    })
}

/// `-sum(p) + sum(lambda * rgt) + rho / 2 * sum(rgt^2)` for per-bidder
/// mean payments and regrets.
pub fn lagrangian_loss(payments: &[f64], regrets: &[f64], lambda: &[f64], rho: f64) -> Result<f64> {
    if payments.len() != regrets.len() || regrets.len() != lambda.len() {
        return dim_err("lagrangian_loss", "vector lengths differ");
    }
    let rev: f64 = payments.iter().sum();
    let lin: f64 = lambda.iter().zip(regrets).map(|(l, r)| l * r).sum();
    let quad: f64 = regrets.iter().map(|r| r * r).sum();
    Ok(-rev + lin + 0.5 * rho * quad)
}

/// Graph form of [`lagrangian_loss`] over `[batch, n]` payments and regrets.
pub fn lagrangian_loss_graph(g: &mut Graph, payments: Var, regrets: Var, lambda: &[f64], rho: f64) -> Result<Var> {
    let shape = g.shape(regrets).to_vec();
    if shape.len() != 2 || g.shape(payments) != shape.as_slice() || shape[1] != lambda.len() {
        return dim_err("lagrangian_loss", format!("{:?} with {} multipliers", shape, lambda.len()));
    }
    let inv_b = 1.0 / shape[0] as f64;
    let rev = g.sum(payments);
    let rev = g.scale(rev, -inv_b);
    let rgt = g.sum_axis(regrets, 0)?;
    let rgt = g.scale(rgt, inv_b);
    let lam = g.constant(Tensor::vector(lambda.to_vec()));
    let lin = g.mul(rgt, lam)?;
    let lin = g.sum(lin);
    let sq = g.mul(rgt, rgt)?;
    let sq = g.sum(sq);
    let sq = g.scale(sq, 0.5 * rho);
    let loss = g.add(rev, lin)?;
    g.add(loss, sq)
}

/// Multipliers and penalty weight of the augmented Lagrangian.
#[derive(Clone, Debug, PartialEq)]
pub struct Multipliers {
    pub lambda: Vec<f64>,
    pub rho: f64,
}

impl Multipliers {
    /// Advances the schedules after 1-indexed batch `batch_index`.
    pub fn schedule_update(&mut self, batch_index: usize, batch_regret: &[f64], cfg: &TrainConfig) {
        if batch_index % cfg.lambda_period == 0 {
            for (l, r) in self.lambda.iter_mut().zip(batch_regret) {
                *l += self.rho * r.max(0.0);
            }
        }
        if batch_index % cfg.rho_period == 0 {
            self.rho += cfg.rho_increment;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchMetrics {
    pub revenue: f64,
    pub regret: f64,
    pub loss: f64,
    pub regret_per_bidder: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub revenue_mean: f64,
    pub regret_mean: f64,
    pub rho: f64,
    pub lambda_mean: f64,
    pub seconds: f64,
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: MechanismParams,
    pub adam: Adam,
    pub multipliers: Multipliers,
    pub epoch: usize,
    pub batch: usize,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    config: TrainConfig,
    state: TrainState,
    data: Vec<ValuationProfile>,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = MechanismParams::init(config.demand, config.sinkhorn.clone(), config.head, &mut rng)?;
        let adam = Adam::new(config.lr, params.parameters());
        let multipliers = Multipliers {
            lambda: vec![config.lambda_init; config.demand.n],
            rho: config.rho_init,
        };
        let state = TrainState {
            params,
            adam,
            multipliers,
            epoch: 0,
            batch: 0,
            rng,
        };
        Self::resume(config, state)
    }

    /// Continues from a saved state. The training set is regenerated from
    /// the config seed.
    pub fn resume(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        state.params.validate()?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        let (n, m) = (config.demand.n, config.demand.m);
        let data = sample_valuations(n, m, config.train_size, &mut data_rng);
        let order = (0..data.len()).collect();
        Ok(Self {
            config,
            state,
            data,
            order,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn params(&self) -> &MechanismParams {
        &self.state.params
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// One optimisation step on `batch`. State is only modified once every
    /// fallible computation has succeeded.
    pub fn train_batch(&mut self, batch: &[ValuationProfile]) -> Result<BatchMetrics> {
        let cfg = &self.config;
        let params = &self.state.params;
        let ascent = misreport_ascent(params, batch, cfg.misreport_steps, cfg.misreport_lr)?;

        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let truth = g.constant(profiles_to_tensor(batch)?);
        let honest = params.forward(&mut g, &vars, truth)?;
        let u_truth = params.truthful_utilities_graph(&mut g, &honest, truth)?;
        let copies = g.constant(profiles_to_tensor(&misreport_profiles(batch, &ascent.reports))?);
        let lying = params.forward(&mut g, &vars, copies)?;
        let u_lie = params.copy_utilities(&mut g, &lying, batch)?;
        let gain = g.sub(u_lie, u_truth)?;
        let regrets = g.relu(gain);
        let mult = &self.state.multipliers;
        let loss = lagrangian_loss_graph(&mut g, honest.payments, regrets, &mult.lambda, mult.rho)?;
        let grads = g.backward(loss)?;
        let grad_list: Vec<Tensor> = vars.parameters().map(|v| grads.wrt(v)).collect();

        let n = cfg.demand.n;
        let b = batch.len() as f64;
        let rv = g.value(regrets).data();
        let regret_per_bidder: Vec<f64> = (0..n)
            .map(|i| rv.iter().skip(i).step_by(n).sum::<f64>() / b)
            .collect();
        let metrics = BatchMetrics {
            revenue: g.value(honest.payments).sum() / b,
            regret: regret_per_bidder.iter().sum::<f64>() / n as f64,
            loss: g.value(loss).item()?,
            regret_per_bidder,
        };

        self.state.adam.step(self.state.params.parameters_mut(), &grad_list)?;
        self.state.batch += 1;
        let idx = self.state.batch;
        self.state
            .multipliers
            .schedule_update(idx, &metrics.regret_per_bidder, &self.config);
        Ok(metrics)
    }

    /// Runs one epoch over a freshly shuffled order of the training set.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        self.order.shuffle(&mut self.state.rng);
        let bs = self.config.batch_size;
        let batches = self.config.batches_per_epoch();
        let (mut rev, mut rgt) = (0.0, 0.0);
        for k in 0..batches {
            let batch: Vec<ValuationProfile> = self.order[k * bs..(k + 1) * bs]
                .iter()
                .map(|&i| self.data[i].clone())
                .collect();
            let m = self.train_batch(&batch)?;
            rev += m.revenue;
            rgt += m.regret;
        }
        let epoch = self.state.epoch;
        self.state.epoch += 1;
        let mult = &self.state.multipliers;
        Ok(EpochMetrics {
            epoch,
            revenue_mean: rev / batches as f64,
            regret_mean: rgt / batches as f64,
            rho: mult.rho,
            lambda_mean: mult.lambda.iter().sum::<f64>() / mult.lambda.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: MechanismParams,
    pub history: Vec<EpochMetrics>,
}

/// Trains from scratch, calling `on_epoch` after every epoch.
pub fn train_with(
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState),
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::new();
    while !trainer.finished() {
        let m = trainer.run_epoch()?;
        on_epoch(&m, trainer.state());
        history.push(m);
    }
    Ok(TrainOutput {
        params: trainer.into_state().params,
        history,
    })
}

pub fn train(config: TrainConfig) -> Result<TrainOutput> {
    train_with(config, |_, _| {})
}
