//! Candidate search for ENC-Model and ENC-Inf.

mod extract;
mod hierarchy;
mod space;

pub use extract::{extract_candidates, SearchOptions, SecondaryBudget, DEFAULT_BEAM, DEFAULT_MAX_CANDIDATES};
pub use hierarchy::{build_hierarchy, GroupingOptions, Hierarchy, Node, DEFAULT_GROUP_SIZE, DEFAULT_TOP_DIMENSION};
pub use space::{limit_space, min_offset, DifferentialSpace, SearchSpace, StepRule, STEP_DIVISOR};

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{EncError, Result};
use crate::eval::AccuracyEvaluator;
use crate::metric::MetricKind;
use crate::network::{NetworkSpec, RankConfiguration};

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ranks: RankConfiguration,
    pub complexity: u64,
    /// Complexity under the secondary model of a joint budget.
    pub secondary_complexity: Option<u64>,
    /// Value of the search metric.
    pub metric: f64,
    pub a_p: f64,
    pub a_m: Option<f64>,
    /// Measured accuracy, once evaluated.
    pub accuracy: Option<f64>,
}

impl Candidate {
    /// Higher metric first, then lexicographically smaller ranks.
    pub fn ranking(a: &Candidate, b: &Candidate) -> Ordering {
        b.metric.total_cmp(&a.metric).then_with(|| a.ranks.cmp(&b.ranks))
    }
}

/// Shape of the explored space.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSummary {
    pub top_dimension: usize,
    pub levels: usize,
    pub subspaces: usize,
    pub r_min: RankConfiguration,
    pub r_max: RankConfiguration,
    pub steps: Vec<usize>,
    pub differential_target: f64,
    /// Complete top-level tuples scored.
    pub visited: u64,
}

/// Candidates sorted best first by [`Candidate::ranking`].
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub kind: MetricKind,
    pub candidates: Vec<Candidate>,
    pub summary: SearchSummary,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Candidate> {
        self.candidates.iter()
    }

    /// Writes one row per candidate: position, per-layer ranks, complexity,
    /// metric values and measured accuracy where known.
    pub fn write_csv<W: Write>(&self, original: u64, out: W) -> Result<()> {
        write_candidates_csv(&self.candidates, original, out)
    }
}

pub fn write_candidates_csv<W: Write>(candidates: &[Candidate], original: u64, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let err = |e: csv::Error| EncError::Argument(format!("csv: {e}"));
    let layers = candidates.first().map_or(0, |c| c.ranks.len());
    let mut header = vec!["position".to_string()];
    header.extend((1..=layers).map(|l| format!("r_{l}")));
    header.extend(
        ["complexity", "ratio", "metric", "a_p", "a_m", "accuracy", "secondary_complexity"]
            .map(String::from),
    );
    writer.write_record(&header).map_err(err)?;
    for (i, c) in candidates.iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(c.ranks.iter().map(|r| r.to_string()));
        row.push(c.complexity.to_string());
        row.push(format!("{:.6}", c.complexity as f64 / original as f64));
        row.push(format!("{:.9e}", c.metric));
        row.push(format!("{:.9e}", c.a_p));
        row.push(c.a_m.map(|v| format!("{v:.9e}")).unwrap_or_default());
        row.push(c.accuracy.map(|v| format!("{v:.6}")).unwrap_or_default());
        row.push(c.secondary_complexity.map(|v| v.to_string()).unwrap_or_default());
        writer.write_record(&row).map_err(err)?;
    }
    writer.flush().map_err(|e| EncError::Argument(format!("csv: {e}")))?;
    Ok(())
}

/// ENC-Model: the metric-best candidate.
pub fn enc_model_select(candidates: &CandidateSet) -> Result<&Candidate> {
    candidates
        .candidates
        .iter()
        .min_by(|a, b| Candidate::ranking(a, b))
        .ok_or_else(|| EncError::EmptyCandidates("nothing to select from".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome {
    pub best: Candidate,
    /// The evaluated candidates in metric order, with accuracies.
    pub evaluated: Vec<Candidate>,
}

/// ENC-Inf: evaluates the `n` metric-best candidates and keeps the most
/// accurate (ties: higher metric, then smaller ranks).
pub fn enc_inf_select(
    candidates: &CandidateSet,
    n: usize,
    network: &NetworkSpec,
    evaluator: &dyn AccuracyEvaluator,
) -> Result<InferenceOutcome> {
    if n == 0 {
        return Err(EncError::Argument("N must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(EncError::EmptyCandidates("nothing to select from".into()));
    }
    let mut top: Vec<Candidate> = candidates.candidates.clone();
    top.sort_by(Candidate::ranking);
    top.truncate(n);
    let evaluated = top
        .into_par_iter()
        .enumerate()
        .map(|(i, mut c)| {
            let acc = evaluator.evaluate(network, &c.ranks).map_err(|e| EncError::Evaluator {
                candidate: i + 1,
                message: e.to_string(),
            })?;
            c.accuracy = Some(acc);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = evaluated
        .iter()
        .min_by(|a, b| {
            let (x, y) = (a.accuracy.unwrap_or(f64::NEG_INFINITY), b.accuracy.unwrap_or(f64::NEG_INFINITY));
            y.total_cmp(&x).then_with(|| Candidate::ranking(a, b))
        })
        .cloned()
        .expect("at least one candidate");
    Ok(InferenceOutcome { best, evaluated })
}
