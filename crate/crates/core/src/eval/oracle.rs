use super::AccuracyEvaluator;
use crate::curve::pca_curve;
use crate::error::{EncError, Result};
use crate::network::{NetworkSpec, RankConfiguration};

/// Test double whose "accuracy" is the product of the PCA-energy curves of
/// the searchable layers, mapped linearly onto `[low, high]`.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    /// Per layer: `y_p` at every integer rank, or `None` for pinned layers.
    tables: Vec<Option<Vec<f64>>>,
    low: f64,
    high: f64,
}

impl AnalyticOracle {
    pub fn new(network: &NetworkSpec, low: f64, high: f64) -> Result<Self> {
        if !(low <= high) {
            return Err(EncError::Argument(format!("oracle range [{low}, {high}] is empty")));
        }
        let tables = (1..=network.len())
            .map(|l| {
                if network.is_compressible(l) {
                    pca_curve(network.layer(l)).map(|c| Some(c.integer_values()))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnalyticOracle { tables, low, high })
    }

    pub fn unit(network: &NetworkSpec) -> Result<Self> {
        Self::new(network, 0.0, 1.0)
    }
}

impl AccuracyEvaluator for AnalyticOracle {
    fn evaluate(&self, network: &NetworkSpec, ranks: &RankConfiguration) -> Result<f64> {
        if ranks.len() != self.tables.len() || network.len() != self.tables.len() {
            return Err(EncError::Ranks(format!(
                "oracle built for {} layers, got {} ranks",
                self.tables.len(),
                ranks.len()
            )));
        }
        let mut product = 1.0;
        for (table, &r) in self.tables.iter().zip(ranks.iter()) {
            if let Some(t) = table {
                let v = t.get(r).ok_or_else(|| EncError::Ranks(format!("rank {r} beyond maximum")))?;
                product *= v;
            }
        }
        Ok(self.low + (self.high - self.low) * product)
    }
}
