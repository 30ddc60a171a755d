//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkauction_core::training::sample_valuations;
use sinkauction_core::{AllocationHead, DemandSpec, MechanismParams, SinkhornConfig, Tensor, ValuationProfile};

pub fn mechanism(demand: DemandSpec, seed: u64) -> MechanismParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MechanismParams::init(demand, SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut rng)
        .expect("valid demand")
}

pub fn profiles(n: usize, m: usize, count: usize, seed: u64) -> Vec<ValuationProfile> {
    sample_valuations(n, m, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `[batch, rows, cols]` costs uniform in `[-1, 1]`.
pub fn costs(batch: usize, rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![batch, rows, cols], data).expect("sized")
}
