pub mod error;
pub mod evaluation;
pub mod graph;
pub mod mechanism;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
pub use evaluation::{evaluate, heatmap_grid, test_regret, EvalConfig, EvalReport, HeatmapGrid, PostedPrices, Vcg};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub use mechanism::{
    Allocation, AllocationHead, Mechanism, MechanismParams, Outcome, Payments, ValuationProfile,
};
pub use optim::Adam;
pub use training::{train, train_with, EpochMetrics, TrainConfig, TrainOutput, Trainer};
pub use transport::{DemandKind, DemandSpec, Marginals, SinkhornConfig};
