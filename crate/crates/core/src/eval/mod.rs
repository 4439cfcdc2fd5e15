//! Accuracy evaluation of truncated networks.

mod dataset;
mod engine;
mod oracle;

pub use dataset::{DatasetFile, MiniDataset, Split};
pub use engine::{argmax, forward, CompiledNetwork, MiniEvaluator};
pub use oracle::AnalyticOracle;

use crate::error::Result;
use crate::network::{NetworkSpec, RankConfiguration};

/// Top-1 accuracy of `network` truncated to `ranks`, in `[0, 1]`.
///
/// Implementations must be deterministic for a fixed network, configuration
/// and dataset.
pub trait AccuracyEvaluator: Send + Sync {
    fn evaluate(&self, network: &NetworkSpec, ranks: &RankConfiguration) -> Result<f64>;
}

impl<F> AccuracyEvaluator for F
where
    F: Fn(&NetworkSpec, &RankConfiguration) -> Result<f64> + Send + Sync,
{
    fn evaluate(&self, network: &NetworkSpec, ranks: &RankConfiguration) -> Result<f64> {
        self(network, ranks)
    }
}
