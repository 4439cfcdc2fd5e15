//! Linear complexity model `C(R) = Σ c_l·r_l`.
//!
//! One multiply–accumulate counts as one FLOP. `C_orig` is taken in the
//! decomposed parameterization, `Σ c_l·r_l^max`, so `C(R_max)/C_orig = 1`;
//! [`dense_total`] gives the cost of the undecomposed network for reporting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EncError, Result};
use crate::network::{Decomposition, LayerKind, LayerSpec, NetworkSpec, RankConfiguration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexityMode {
    Flops,
    Parameters,
}

impl fmt::Display for ComplexityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComplexityMode::Flops => "flops",
            ComplexityMode::Parameters => "parameters",
        })
    }
}

impl FromStr for ComplexityMode {
    type Err = EncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" => Ok(ComplexityMode::Flops),
            "parameters" | "params" => Ok(ComplexityMode::Parameters),
            other => Err(EncError::Argument(format!("unknown complexity mode '{other}'"))),
        }
    }
}

/// Cost of one unit of rank in `layer`.
///
/// Spatial: `W·H·D·(I+O)`, channel: `W·H·(I·D² + O)`; parameter mode drops
/// the `W·H` factor. Undecomposed layers have a single unit of rank costing
/// the dense layer.
pub fn coefficient(layer: &LayerSpec, mode: ComplexityMode) -> u64 {
    let (w, h) = (layer.width as u64, layer.height as u64);
    let (i, o) = (layer.in_channels as u64, layer.out_channels as u64);
    let d = layer.window() as u64;
    let per_position = match layer.decomposition {
        Decomposition::Spatial => d * (i + o),
        Decomposition::Channel => i * d * d + o,
        Decomposition::None => dense_per_position(layer),
    };
    match mode {
        ComplexityMode::Flops => w * h * per_position,
        ComplexityMode::Parameters => per_position,
    }
}

fn dense_per_position(layer: &LayerSpec) -> u64 {
    (layer.in_channels * layer.kernel[0] * layer.kernel[1] * layer.out_channels) as u64
}

/// Cost of `layer` run densely, without decomposition.
pub fn dense_cost(layer: &LayerSpec, mode: ComplexityMode) -> u64 {
    let spatial = match (layer.kind, mode) {
        (LayerKind::FullyConnected, _) | (_, ComplexityMode::Parameters) => 1,
        (LayerKind::Convolutional, ComplexityMode::Flops) => (layer.width * layer.height) as u64,
    };
    spatial * dense_per_position(layer)
}

pub fn dense_total(net: &NetworkSpec, mode: ComplexityMode) -> u64 {
    net.layers().iter().map(|l| dense_cost(l, mode)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityModel {
    pub mode: ComplexityMode,
    coefficients: Vec<u64>,
    max_ranks: Vec<usize>,
    pinned: Vec<Option<usize>>,
    original: u64,
}

impl ComplexityModel {
    pub fn new(net: &NetworkSpec, mode: ComplexityMode) -> Self {
        let coefficients: Vec<u64> = net.layers().iter().map(|l| coefficient(l, mode)).collect();
        let max_ranks = net.max_ranks();
        let original = coefficients
            .iter()
            .zip(&max_ranks)
            .map(|(&c, &r)| c * r as u64)
            .sum();
        ComplexityModel {
            mode,
            coefficients,
            max_ranks,
            pinned: (1..=net.len()).map(|l| net.pinned_rank(l)).collect(),
            original,
        }
    }

    /// Model over bare coefficients, every layer searchable.
    pub fn from_coefficients(coefficients: Vec<u64>, max_ranks: Vec<usize>, mode: ComplexityMode) -> Self {
        assert_eq!(coefficients.len(), max_ranks.len());
        let original = coefficients
            .iter()
            .zip(&max_ranks)
            .map(|(&c, &r)| c * r as u64)
            .sum();
        let pinned = vec![None; coefficients.len()];
        ComplexityModel {
            mode,
            coefficients,
            max_ranks,
            pinned,
            original,
        }
    }

    pub fn coefficients(&self) -> &[u64] {
        &self.coefficients
    }

    pub fn max_ranks(&self) -> &[usize] {
        &self.max_ranks
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// `C_orig = Σ c_l·r_l^max`.
    pub fn original(&self) -> u64 {
        self.original
    }

    pub fn total(&self, ranks: &RankConfiguration) -> Result<u64> {
        self.total_of(ranks.ranks())
    }

    pub fn total_of(&self, ranks: &[usize]) -> Result<u64> {
        if ranks.len() != self.coefficients.len() {
            return Err(EncError::Ranks(format!(
                "{} ranks for a {}-layer complexity model",
                ranks.len(),
                self.coefficients.len()
            )));
        }
        Ok(self
            .coefficients
            .iter()
            .zip(ranks)
            .map(|(&c, &r)| c * r as u64)
            .sum())
    }

    /// `C` of a real-valued configuration.
    pub fn total_real(&self, ranks: &[f64]) -> f64 {
        self.coefficients.iter().zip(ranks).map(|(&c, &r)| c as f64 * r).sum()
    }

    /// Contribution of pinned layers, which no configuration can change.
    pub fn pinned_total(&self) -> u64 {
        self.coefficients
            .iter()
            .zip(&self.pinned)
            .filter_map(|(&c, p)| p.map(|r| c * r as u64))
            .sum()
    }

    /// Smallest reachable complexity: rank 1 on every searchable layer.
    pub fn floor(&self) -> u64 {
        self.coefficients
            .iter()
            .zip(&self.pinned)
            .map(|(&c, p)| c * p.unwrap_or(1) as u64)
            .sum()
    }

    /// Largest reachable complexity: maximum rank on every searchable layer.
    pub fn ceiling(&self) -> u64 {
        self.coefficients
            .iter()
            .zip(&self.pinned)
            .zip(&self.max_ranks)
            .map(|((&c, p), &m)| c * p.unwrap_or(m) as u64)
            .sum()
    }
}

/// Complexity target and margins, all in absolute complexity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub target: f64,
    pub space_margin: f64,
    pub candidate_margin: f64,
}

impl Budget {
    /// Margins default to 10% of `C_orig` (space) and 0.5% of the target
    /// (candidates).
    pub fn with_defaults(target: f64, original: u64) -> Self {
        Budget {
            target,
            space_margin: 0.10 * original as f64,
            candidate_margin: 0.005 * target,
        }
    }

    /// Target given as a fraction of `C_orig` when `≤ 1`, absolute otherwise.
    pub fn resolve_target(value: f64, original: u64) -> f64 {
        if value <= 1.0 {
            value * original as f64
        } else {
            value
        }
    }

    pub fn validate(&self, original: u64) -> Result<()> {
        if !(self.target > 0.0 && self.target <= original as f64) {
            return Err(EncError::Infeasible(format!(
                "target {} outside (0, C_orig = {original}]",
                self.target
            )));
        }
        if !(self.candidate_margin >= 0.0 && self.space_margin >= 0.0) {
            return Err(EncError::Argument("margins must be nonnegative".into()));
        }
        if self.candidate_margin >= self.space_margin && self.space_margin > 0.0 {
            return Err(EncError::Argument(format!(
                "candidate margin {} must be smaller than space margin {}",
                self.candidate_margin, self.space_margin
            )));
        }
        Ok(())
    }

    /// Open candidate window `C_t − δ_m < C < C_t + δ_m`.
    pub fn admits(&self, complexity: u64) -> bool {
        let c = complexity as f64;
        self.target - self.candidate_margin < c && c < self.target + self.candidate_margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coefficients_by_kind() {
        let spatial = LayerSpec::convolutional("s", 8, 8, 3, 16, 32, Decomposition::Spatial);
        assert_eq!(coefficient(&spatial, ComplexityMode::Flops), 9216);
        let channel = LayerSpec::convolutional("c", 8, 8, 3, 16, 32, Decomposition::Channel);
        assert_eq!(coefficient(&channel, ComplexityMode::Flops), 11264);
        let fc = LayerSpec::fully_connected("fc", 100, 10);
        assert_eq!(coefficient(&fc, ComplexityMode::Parameters), 110);
        assert_eq!(coefficient(&fc, ComplexityMode::Flops), 110);
        assert_eq!(coefficient(&spatial, ComplexityMode::Parameters), 144);
    }

    #[test]
    fn totals() {
        let model = ComplexityModel::from_coefficients(vec![10, 20], vec![4, 3], ComplexityMode::Flops);
        assert_eq!(model.total_of(&[3, 2]).unwrap(), 70);
        assert_eq!(model.total_of(&[4, 3]).unwrap(), model.original());
        assert_eq!(model.total_of(&[1, 1]).unwrap(), 30);
        assert!(model.total_of(&[1]).is_err());
    }

    #[test]
    fn window_is_open() {
        let b = Budget {
            target: 100.0,
            space_margin: 10.0,
            candidate_margin: 1.0,
        };
        assert!(b.admits(100));
        assert!(!b.admits(101));
        assert!(!b.admits(99));
    }

    proptest! {
        #[test]
        fn total_is_linear(
            coeffs in proptest::collection::vec(1u64..10_000, 1..8),
            seed in any::<u64>(),
        ) {
            let n = coeffs.len();
            let max: Vec<usize> = (0..n).map(|i| 8 + (seed as usize >> i) % 40).collect();
            let model = ComplexityModel::from_coefficients(coeffs, max.clone(), ComplexityMode::Flops);
            let a: Vec<usize> = max.iter().enumerate().map(|(i, m)| (seed as usize >> (i + 3)) % (m / 2) + 1).collect();
            let b: Vec<usize> = max.iter().enumerate().map(|(i, m)| (seed as usize >> (i + 7)) % (m / 2)).collect();
            let sum: Vec<usize> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let tb: u64 = model.coefficients().iter().zip(&b).map(|(&c, &r)| c * r as u64).sum();
            prop_assert_eq!(model.total_of(&a).unwrap() + tb, model.total_of(&sum).unwrap());
            // strictly increasing in each coordinate
            for l in 0..n {
                let mut up = a.clone();
                up[l] += 1;
                prop_assert!(model.total_of(&up).unwrap() > model.total_of(&a).unwrap());
            }
        }
    }
}
