use crate::complexity::{Budget, ComplexityModel};
use crate::error::{EncError, Result};
use crate::mapping::{floor_rank, MappingTable};
use crate::network::RankConfiguration;

/// Divisor of the differential range in the default step rule.
pub const STEP_DIVISOR: usize = 32;

const INTEGER_SNAP: f64 = 1e-7;

/// Bounded integer search space `R_min ≤ R ≤ R_max` with per-layer steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub r_min: RankConfiguration,
    pub r_max: RankConfiguration,
    pub steps: Vec<usize>,
}

/// How step sizes are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `max(1, ⌈range/32⌉)` per layer.
    #[default]
    Auto,
    Uniform(usize),
    PerLayer(Vec<usize>),
}

fn ceil_rank(r: f64) -> usize {
    let nearest = r.round();
    let v = if (r - nearest).abs() < INTEGER_SNAP { nearest } else { r.ceil() };
    v.max(1.0) as usize
}

impl SearchSpace {
    pub fn new(r_min: RankConfiguration, r_max: RankConfiguration, steps: Vec<usize>) -> Result<Self> {
        if r_min.len() != r_max.len() || steps.len() != r_max.len() {
            return Err(EncError::Argument("search bounds and steps disagree on layer count".into()));
        }
        if !r_min.le(&r_max) {
            return Err(EncError::Argument(format!("R_min {r_min} exceeds R_max {r_max}")));
        }
        if r_min.iter().any(|&r| r == 0) || steps.contains(&0) {
            return Err(EncError::Argument("ranks and steps must be at least 1".into()));
        }
        Ok(SearchSpace { r_min, r_max, steps })
    }

    /// `R_max − R_min` per layer.
    pub fn ranges(&self) -> Vec<usize> {
        self.r_max.iter().zip(self.r_min.iter()).map(|(a, b)| a - b).collect()
    }

    pub fn with_steps(mut self, rule: &StepRule) -> Result<Self> {
        let ranges = self.ranges();
        self.steps = match rule {
            StepRule::Auto => ranges.iter().map(|&r| r.div_ceil(STEP_DIVISOR).max(1)).collect(),
            StepRule::Uniform(0) => return Err(EncError::Argument("step must be at least 1".into())),
            StepRule::Uniform(t) => vec![*t; ranges.len()],
            StepRule::PerLayer(v) => {
                if v.len() != ranges.len() || v.contains(&0) {
                    return Err(EncError::Argument(format!(
                        "need {} positive per-layer steps, got {v:?}",
                        ranges.len()
                    )));
                }
                v.clone()
            }
        };
        Ok(self)
    }
}

/// Bounds from the equal-metric mapping: `R_max = ⌈f_{C-R}(C_t + δ_s)⌉`,
/// `R_min = ⌊f_{C-R}(C_t − δ_s)⌋`, with both arguments clamped into the
/// reachable range. Steps follow [`StepRule::Auto`].
pub fn limit_space(table: &MappingTable, target: f64, space_margin: f64) -> Result<SearchSpace> {
    let model = table.complexity_model();
    let (floor, ceiling) = (model.floor() as f64, model.ceiling() as f64);
    if !(target >= floor && target <= ceiling) {
        return Err(EncError::Infeasible(format!(
            "target {target} outside the reachable range [{floor}, {ceiling}]"
        )));
    }
    let upper = table.map_c_to_r((target + space_margin).min(ceiling))?;
    let lower = table.map_c_to_r((target - space_margin).max(floor))?;
    let max_ranks = model.max_ranks();
    let r_max: Vec<usize> = upper.iter().zip(max_ranks).map(|(&r, &m)| ceil_rank(r).min(m)).collect();
    let r_min: Vec<usize> = lower
        .iter()
        .zip(&r_max)
        .map(|(&r, &hi)| floor_rank(r).min(hi))
        .collect();
    let n = r_max.len();
    SearchSpace::new(RankConfiguration::new(r_min), RankConfiguration::new(r_max), vec![1; n])?
        .with_steps(&StepRule::Auto)
}

/// Search space shifted to start at zero: `R = R_max − R̂` with
/// `0 ≤ R̂ ≤ R_max − R_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialSpace {
    pub r_max: RankConfiguration,
    pub ranges: Vec<usize>,
    pub steps: Vec<usize>,
    pub coefficients: Vec<u64>,
    /// `ΔC_t = C(R_max) − C_t`.
    pub target: f64,
    pub margin: f64,
}

pub fn min_offset(space: &SearchSpace, model: &ComplexityModel, budget: &Budget) -> Result<DifferentialSpace> {
    let top = model.total(&space.r_max)?;
    Ok(DifferentialSpace {
        r_max: space.r_max.clone(),
        ranges: space.ranges(),
        steps: space.steps.clone(),
        coefficients: model.coefficients().to_vec(),
        target: top as f64 - budget.target,
        margin: budget.candidate_margin,
    })
}

impl DifferentialSpace {
    /// Differential values `0, t, 2t, …` up to the range of layer `i` (0-based).
    pub fn values(&self, i: usize) -> Vec<usize> {
        (0..=self.ranges[i]).step_by(self.steps[i]).collect()
    }

    /// `C(R̂)`.
    pub fn cost(&self, offsets: &[usize]) -> u64 {
        self.coefficients.iter().zip(offsets).map(|(&c, &d)| c * d as u64).sum()
    }

    /// `R_max − R̂`.
    pub fn reconstruct(&self, offsets: &[usize]) -> RankConfiguration {
        RankConfiguration::new(self.r_max.iter().zip(offsets).map(|(r, d)| r - d).collect())
    }

    /// Integer differential costs inside the open window
    /// `ΔC_t − δ_m < C(R̂) < ΔC_t + δ_m`, or `None` if it holds none.
    pub fn window(&self) -> Option<(u64, u64)> {
        let lo = self.target - self.margin;
        let hi = self.target + self.margin;
        let lo_int = if lo < 0.0 { 0.0 } else { lo.floor() + 1.0 };
        let hi_int = hi.ceil() - 1.0;
        if hi_int < lo_int || hi_int < 0.0 {
            return None;
        }
        Some((lo_int as u64, hi_int as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::ComplexityMode;

    #[test]
    fn differential_target_by_hand() {
        let model = ComplexityModel::from_coefficients(vec![10, 20], vec![8, 8], ComplexityMode::Flops);
        let space = SearchSpace::new(RankConfiguration::new(vec![2, 1]), RankConfiguration::new(vec![4, 3]), vec![1, 1])
            .unwrap();
        let budget = Budget {
            target: 80.0,
            space_margin: 30.0,
            candidate_margin: 5.0,
        };
        let diff = min_offset(&space, &model, &budget).unwrap();
        assert_eq!(diff.target, 20.0);
        assert_eq!(diff.ranges, vec![2, 2]);
        assert_eq!(diff.window(), Some((16, 24)));
        let d = [1, 1];
        let r = diff.reconstruct(&d);
        assert_eq!(model.total(&r).unwrap(), 100 - diff.cost(&d));
    }

    #[test]
    fn degenerate_space() {
        let model = ComplexityModel::from_coefficients(vec![10, 20], vec![8, 8], ComplexityMode::Flops);
        let r = RankConfiguration::new(vec![3, 3]);
        let space = SearchSpace::new(r.clone(), r, vec![1, 1]).unwrap();
        let budget = Budget {
            target: 88.0,
            space_margin: 0.0,
            candidate_margin: 1.0,
        };
        let diff = min_offset(&space, &model, &budget).unwrap();
        assert_eq!(diff.values(0), vec![0]);
        // ΔC_t = 2 ≥ δ_m leaves the only point, zero, outside the window
        assert_eq!(diff.window(), Some((2, 2)));
    }

    #[test]
    fn step_rules() {
        let space = SearchSpace::new(
            RankConfiguration::new(vec![1, 10]),
            RankConfiguration::new(vec![100, 20]),
            vec![1, 1],
        )
        .unwrap();
        assert_eq!(space.clone().with_steps(&StepRule::Auto).unwrap().steps, vec![4, 1]);
        assert_eq!(space.clone().with_steps(&StepRule::Uniform(3)).unwrap().steps, vec![3, 3]);
        assert!(space.with_steps(&StepRule::Uniform(0)).is_err());
    }

    #[test]
    fn ceil_and_floor_snap() {
        assert_eq!(ceil_rank(2.0000000001), 2);
        assert_eq!(ceil_rank(2.1), 3);
        assert_eq!(floor_rank(2.9999999999), 3);
        assert_eq!(floor_rank(0.2), 1);
    }
}
