//! Candidate extraction over the differential space.
//!
//! Every node of the group tree gets a list of choices: member offsets with
//! their differential cost and partial log-metrics. Group nodes combine the
//! choices of their children and keep, per distinct cost, the `K` best by
//! partial metric. The top-level variables are then enumerated depth first,
//! keeping only tuples whose cost lies in the differential window. With a
//! candidate cap, subtrees whose metric bound cannot beat the current cap-th
//! best are skipped.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::complexity::{Budget, ComplexityModel};
use crate::curve::CurveKind;
use crate::error::{EncError, Result};
use crate::metric::{MetricKind, NetworkMetric};
use crate::network::RankConfiguration;

use super::hierarchy::{build_hierarchy, GroupingOptions, Hierarchy};
use super::space::{min_offset, DifferentialSpace, SearchSpace};
use super::{Candidate, CandidateSet, SearchSummary};

pub const DEFAULT_BEAM: usize = 64;
pub const DEFAULT_MAX_CANDIDATES: usize = 10_000;

/// Buckets of the knapsack bound on the remaining variables.
const BOUND_BUCKETS: u64 = 4096;
/// Relative slack on metric comparisons used for pruning.
const PRUNE_SLACK: f64 = 1e-9;

/// A second complexity window every candidate must also satisfy.
#[derive(Debug, Clone)]
pub struct SecondaryBudget {
    pub model: ComplexityModel,
    pub budget: Budget,
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Choices kept per distinct cost in each group; `None` keeps all.
    pub beam: Option<usize>,
    pub grouping: GroupingOptions,
    /// Best candidates retained; `None` keeps every configuration in the
    /// window.
    pub max_candidates: Option<usize>,
    pub secondary: Option<SecondaryBudget>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            beam: Some(DEFAULT_BEAM),
            grouping: GroupingOptions::default(),
            max_candidates: Some(DEFAULT_MAX_CANDIDATES),
            secondary: None,
        }
    }
}

impl SearchOptions {
    /// No beam and no cap: the full window.
    pub fn exhaustive() -> Self {
        SearchOptions {
            beam: None,
            max_candidates: None,
            ..SearchOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Choice {
    cost: u64,
    lp: f64,
    lm: f64,
    /// Offsets of the node's layers, in layer order.
    offsets: Vec<u32>,
}

fn key(kind: MetricKind, c: &Choice) -> f64 {
    match kind {
        MetricKind::Pca => c.lp,
        MetricKind::Measured | MetricKind::Combined => c.lm,
    }
}

/// Better first: higher score, then smaller offsets.
fn by_score(score: impl Fn(&Choice) -> f64) -> impl Fn(&Choice, &Choice) -> std::cmp::Ordering {
    move |a, b| score(b).total_cmp(&score(a)).then_with(|| b.offsets.cmp(&a.offsets))
}

fn prune(mut choices: Vec<Choice>, beam: Option<usize>, kind: MetricKind) -> Vec<Choice> {
    let Some(k) = beam else {
        return choices;
    };
    choices.sort_by_key(|c| c.cost);
    let mut out = Vec::with_capacity(choices.len().min(k * 64));
    let mut start = 0;
    while start < choices.len() {
        let cost = choices[start].cost;
        let end = start + choices[start..].partition_point(|c| c.cost == cost);
        let bucket = &mut choices[start..end];
        if bucket.len() <= k {
            out.extend(bucket.iter().cloned());
        } else if kind == MetricKind::Combined {
            bucket.sort_by(by_score(|c| c.lp));
            let mut keep: Vec<Choice> = bucket[..k].to_vec();
            bucket.sort_by(by_score(|c| c.lm));
            for c in &bucket[..k] {
                if !keep.iter().any(|d| d.offsets == c.offsets) {
                    keep.push(c.clone());
                }
            }
            out.extend(keep);
        } else {
            bucket.sort_by(by_score(|c| key(kind, c)));
            out.extend(bucket[..k].iter().cloned());
        }
        start = end;
    }
    out
}

struct Tables<'a> {
    pca: Option<&'a [Option<Vec<f64>>]>,
    measured: Option<&'a [Option<Vec<f64>>]>,
}

impl Tables<'_> {
    fn lp(&self, layer: usize, rank: usize) -> f64 {
        self.pca.and_then(|t| t[layer].as_ref()).map_or(0.0, |t| t[rank])
    }

    fn lm(&self, layer: usize, rank: usize) -> f64 {
        self.measured.and_then(|t| t[layer].as_ref()).map_or(0.0, |t| t[rank])
    }
}

fn node_choices(
    tree: &Hierarchy,
    id: usize,
    diff: &DifferentialSpace,
    tables: &Tables<'_>,
    limit: u64,
    beam: Option<usize>,
    kind: MetricKind,
) -> Vec<Choice> {
    let node = &tree.nodes[id];
    if node.is_leaf() {
        let l = node.layers[0];
        let c = diff.coefficients[l];
        return diff
            .values(l)
            .into_iter()
            .map(|d| (d, c * d as u64))
            .take_while(|&(_, cost)| cost <= limit)
            .map(|(d, cost)| {
                let r = diff.r_max[l] - d;
                Choice {
                    cost,
                    lp: tables.lp(l, r),
                    lm: tables.lm(l, r),
                    offsets: vec![d as u32],
                }
            })
            .collect();
    }
    let mut acc: Option<Vec<Choice>> = None;
    for &child in &node.children {
        let next = node_choices(tree, child, diff, tables, limit, beam, kind);
        acc = Some(match acc {
            None => next,
            Some(prev) => {
                let mut combined = Vec::new();
                for a in &prev {
                    for b in &next {
                        let cost = a.cost + b.cost;
                        if cost > limit {
                            continue;
                        }
                        let mut offsets = a.offsets.clone();
                        offsets.extend_from_slice(&b.offsets);
                        combined.push(Choice {
                            cost,
                            lp: a.lp + b.lp,
                            lm: a.lm + b.lm,
                            offsets,
                        });
                    }
                }
                prune(combined, beam, kind)
            }
        });
    }
    prune(acc.unwrap_or_default(), beam, kind)
}

/// Candidate extraction; see the module docs.
pub fn extract_candidates(
    metric: &NetworkMetric,
    space: &SearchSpace,
    budget: &Budget,
    options: &SearchOptions,
) -> Result<CandidateSet> {
    let model = metric.complexity();
    let diff = min_offset(space, model, budget)?;
    let kind = metric.kind;
    let n_layers = diff.ranges.len();
    let pca_table = metric.log_table(CurveKind::Pca).map(|t| t.as_slice());
    let searchable: Vec<usize> = (0..n_layers)
        .filter(|&l| pca_table.is_some_and(|t| t[l].is_some()) && diff.ranges[l] > 0)
        .collect();
    let counts: Vec<usize> = (0..n_layers).map(|l| diff.values(l).len()).collect();
    let tree = build_hierarchy(&diff.coefficients, &searchable, &counts, &options.grouping)?;
    let mut summary = SearchSummary {
        top_dimension: tree.top_dimension(),
        levels: tree.levels(),
        subspaces: tree.subspace_count(),
        r_min: space.r_min.clone(),
        r_max: space.r_max.clone(),
        steps: space.steps.clone(),
        differential_target: diff.target,
        visited: 0,
    };
    let empty = || {
        EncError::EmptyCandidates(format!(
            "window {} ± {} holds no configuration between {} and {}; try doubling the candidate margin to {}",
            budget.target,
            budget.candidate_margin,
            space.r_min,
            space.r_max,
            2.0 * budget.candidate_margin
        ))
    };
    let (lo, hi) = diff.window().ok_or_else(empty)?;

    let tables = Tables {
        pca: pca_table,
        measured: metric.log_table(CurveKind::Measured).map(|t| t.as_slice()),
    };
    let vars: Vec<Vec<Choice>> = tree
        .top
        .par_iter()
        .map(|&t| node_choices(&tree, t, &diff, &tables, hi, options.beam, kind))
        .collect();

    let search = TopSearch::new(metric, &diff, budget, options, vars, &tree, (lo, hi));
    let (mut candidates, visited) = search.run();
    summary.visited = visited;
    candidates.sort_by(Candidate::ranking);
    candidates.dedup_by(|a, b| a.ranks == b.ranks);
    if let Some(m) = options.max_candidates {
        candidates.truncate(m);
    }
    if candidates.is_empty() {
        return Err(empty());
    }
    Ok(CandidateSet {
        kind,
        candidates,
        summary,
    })
}

struct TopSearch<'a> {
    metric: &'a NetworkMetric,
    diff: &'a DifferentialSpace,
    budget: &'a Budget,
    options: &'a SearchOptions,
    /// Per top-level variable: choices in score order (all but the last
    /// variable) or cost order (the last).
    vars: Vec<Vec<Choice>>,
    /// Layers of each top-level variable.
    layers: Vec<Vec<usize>>,
    suffix_min: Vec<u64>,
    suffix_max: Vec<u64>,
    lo: u64,
    hi: u64,
    bounds: Option<Bounds>,
    threshold: AtomicU64,
}

/// Knapsack bounds: `pca[j][k]` bounds the partial log-metric of variables
/// `j..` when their cost must reach at least `k·q`.
struct Bounds {
    q: u64,
    pca: Vec<Vec<f64>>,
    measured: Vec<Vec<f64>>,
}

fn knapsack(vars: &[Vec<Choice>], q: u64, buckets: usize, value: impl Fn(&Choice) -> f64) -> Vec<Vec<f64>> {
    let n = vars.len();
    let mut g = vec![vec![f64::NEG_INFINITY; buckets]; n + 1];
    g[n][0] = 0.0;
    for j in (0..n).rev() {
        let (head, tail) = g.split_at_mut(j + 1);
        let next = &tail[0];
        let cur = &mut head[j];
        for c in &vars[j] {
            let shift = c.cost.div_ceil(q) as usize;
            let v = value(c);
            for (k, slot) in cur.iter_mut().enumerate() {
                let b = v + next[k.saturating_sub(shift)];
                if b > *slot {
                    *slot = b;
                }
            }
        }
    }
    g
}

struct Collector {
    cap: Option<usize>,
    items: Vec<Candidate>,
    /// Metric of the cap-th best candidate once `cap` are held.
    threshold: f64,
    visited: u64,
}

impl Collector {
    fn push(&mut self, c: Candidate) {
        self.items.push(c);
        if let Some(cap) = self.cap {
            if self.items.len() >= 2 * cap.max(1) {
                self.items.sort_by(Candidate::ranking);
                self.items.truncate(cap);
                self.threshold = self.items[cap - 1].metric;
            }
        }
    }
}

impl<'a> TopSearch<'a> {
    fn new(
        metric: &'a NetworkMetric,
        diff: &'a DifferentialSpace,
        budget: &'a Budget,
        options: &'a SearchOptions,
        mut vars: Vec<Vec<Choice>>,
        tree: &Hierarchy,
        (lo, hi): (u64, u64),
    ) -> Self {
        let kind = metric.kind;
        let n = vars.len();
        for (j, v) in vars.iter_mut().enumerate() {
            if j + 1 == n {
                v.sort_by(|a, b| a.cost.cmp(&b.cost).then_with(|| a.offsets.cmp(&b.offsets)));
            } else {
                v.sort_by(by_score(|c| key(kind, c)));
            }
        }
        let mut suffix_min = vec![0u64; n + 1];
        let mut suffix_max = vec![0u64; n + 1];
        for j in (0..n).rev() {
            suffix_min[j] = suffix_min[j + 1] + vars[j].iter().map(|c| c.cost).min().unwrap_or(0);
            suffix_max[j] = suffix_max[j + 1] + vars[j].iter().map(|c| c.cost).max().unwrap_or(0);
        }
        let bounds = options.max_candidates.map(|_| {
            let q = (hi / BOUND_BUCKETS).max(1);
            let buckets = (lo / q) as usize + 1;
            Bounds {
                q,
                pca: knapsack(&vars, q, buckets, |c| c.lp),
                measured: knapsack(&vars, q, buckets, |c| c.lm),
            }
        });
        TopSearch {
            metric,
            diff,
            budget,
            options,
            layers: tree.top.iter().map(|&t| tree.nodes[t].layers.clone()).collect(),
            vars,
            suffix_min,
            suffix_max,
            lo,
            hi,
            bounds,
            threshold: AtomicU64::new(f64::NEG_INFINITY.to_bits()),
        }
    }

    fn run(&self) -> (Vec<Candidate>, u64) {
        let n = self.vars.len();
        let collector = || Collector {
            cap: self.options.max_candidates,
            items: Vec::new(),
            threshold: f64::NEG_INFINITY,
            visited: 0,
        };
        if n == 0 {
            let mut c = collector();
            if self.lo == 0 {
                self.leaf(&[], &mut c);
            }
            return (c.items, c.visited);
        }
        if n == 1 {
            let mut c = collector();
            let mut stack = Vec::with_capacity(1);
            self.descend(0, 0, 0.0, 0.0, &mut stack, &mut c);
            return (c.items, c.visited);
        }
        let parts: Vec<Collector> = (0..self.vars[0].len())
            .into_par_iter()
            .map(|i| {
                let mut c = collector();
                let choice = &self.vars[0][i];
                if self.admissible(1, choice.cost, choice.lp, choice.lm, &c) {
                    let mut stack = vec![i];
                    self.descend(1, choice.cost, choice.lp, choice.lm, &mut stack, &mut c);
                }
                c
            })
            .collect();
        let visited = parts.iter().map(|c| c.visited).sum();
        (parts.into_iter().flat_map(|c| c.items).collect(), visited)
    }

    fn current_threshold(&self, local: &Collector) -> f64 {
        local.threshold.max(f64::from_bits(self.threshold.load(Ordering::Relaxed)))
    }

    fn publish(&self, local: &Collector) {
        if local.threshold == f64::NEG_INFINITY {
            return;
        }
        let mut seen = self.threshold.load(Ordering::Relaxed);
        while local.threshold > f64::from_bits(seen) {
            match self
                .threshold
                .compare_exchange_weak(seen, local.threshold.to_bits(), Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => break,
                Err(now) => seen = now,
            }
        }
    }

    fn score_bound(&self, lp: f64, lm: f64) -> f64 {
        let ceiling_ratio = (self.budget.target + self.budget.candidate_margin) / self.metric.complexity().original() as f64;
        match self.metric.kind {
            MetricKind::Pca => lp.exp(),
            MetricKind::Measured => lm.exp(),
            MetricKind::Combined => lp.exp() * ceiling_ratio + lm.exp(),
        }
    }

    /// Whether variables `j..` can still complete a tuple that reaches the
    /// window and could enter the retained set.
    fn admissible(&self, j: usize, cost: u64, lp: f64, lm: f64, local: &Collector) -> bool {
        if cost + self.suffix_min[j] > self.hi || cost + self.suffix_max[j] < self.lo {
            return false;
        }
        let Some(b) = &self.bounds else {
            return true;
        };
        let need = self.lo.saturating_sub(cost);
        let k = (need / b.q) as usize;
        let (bp, bm) = (b.pca[j][k], b.measured[j][k]);
        if bp == f64::NEG_INFINITY {
            return false;
        }
        let threshold = self.current_threshold(local);
        if threshold == f64::NEG_INFINITY {
            return true;
        }
        let bound = self.score_bound(lp + bp, lm + bm);
        bound >= threshold - PRUNE_SLACK * threshold.abs().max(1e-300)
    }

    fn descend(&self, j: usize, cost: u64, lp: f64, lm: f64, stack: &mut Vec<usize>, local: &mut Collector) {
        let n = self.vars.len();
        if j + 1 == n {
            let last = &self.vars[j];
            let from = last.partition_point(|c| c.cost + cost < self.lo);
            let to = last.partition_point(|c| c.cost + cost <= self.hi);
            for i in from..to {
                let c = &last[i];
                if self.bounds.is_some() {
                    let threshold = self.current_threshold(local);
                    let quick = self.score_bound(lp + c.lp, lm + c.lm);
                    if threshold > f64::NEG_INFINITY && quick < threshold - PRUNE_SLACK * threshold.abs().max(1e-300) {
                        continue;
                    }
                }
                stack.push(i);
                self.leaf(stack, local);
                stack.pop();
            }
            return;
        }
        for i in 0..self.vars[j].len() {
            let c = &self.vars[j][i];
            let (cost, lp, lm) = (cost + c.cost, lp + c.lp, lm + c.lm);
            if !self.admissible(j + 1, cost, lp, lm, local) {
                continue;
            }
            stack.push(i);
            self.descend(j + 1, cost, lp, lm, stack, local);
            stack.pop();
        }
    }

    fn leaf(&self, stack: &[usize], local: &mut Collector) {
        local.visited += 1;
        let mut offsets = vec![0usize; self.diff.ranges.len()];
        for (j, &i) in stack.iter().enumerate() {
            for (&l, &d) in self.layers[j].iter().zip(&self.vars[j][i].offsets) {
                offsets[l] = d as usize;
            }
        }
        let ranks = self.diff.reconstruct(&offsets);
        let Some(candidate) = score(self.metric, self.budget, self.options.secondary.as_ref(), ranks) else {
            return;
        };
        let before = local.threshold;
        local.push(candidate);
        if local.threshold != before {
            self.publish(local);
        }
    }
}

/// Scores a configuration canonically, or `None` when it falls outside a
/// window.
pub(crate) fn score(
    metric: &NetworkMetric,
    budget: &Budget,
    secondary: Option<&SecondaryBudget>,
    ranks: RankConfiguration,
) -> Option<Candidate> {
    let complexity = metric.complexity().total(&ranks).ok()?;
    if !budget.admits(complexity) {
        return None;
    }
    let secondary_complexity = match secondary {
        Some(s) => {
            let c = s.model.total(&ranks).ok()?;
            if !s.budget.admits(c) {
                return None;
            }
            Some(c)
        }
        None => None,
    };
    let a_p = metric.a_p(&ranks).ok()?;
    let a_m = metric.a_m(&ranks).ok();
    let value = metric.evaluate(&ranks).ok()?;
    Some(Candidate {
        ranks,
        complexity,
        secondary_complexity,
        metric: value,
        a_p,
        a_m,
        accuracy: None,
    })
}
