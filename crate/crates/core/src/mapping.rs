//! Complexity ↔ accuracy mapping through equal-metric configurations.
//!
//! Every row of a [`MappingTable`] holds a common layer metric `a`, the
//! real-valued configuration `R_e(a)` with `y_l(r_l) = a` on every searchable
//! layer, its complexity and its network metric.

use std::io::Write;

use rayon::prelude::*;

use crate::complexity::ComplexityModel;
use crate::curve::LayerCurve;
use crate::error::{EncError, Result};
use crate::metric::NetworkMetric;
use crate::network::RankConfiguration;

pub const DEFAULT_GRID_SIZE: usize = 256;
pub const MIN_GRID_SIZE: usize = 16;

/// Integer parts within this distance of a real rank are taken as exact.
const INTEGER_SNAP: f64 = 1e-7;
const BISECTION_STEPS: usize = 200;
/// How far ENC-Map's rounding may move a rank from the equal-metric point.
const TRADE_RADIUS: f64 = 2.0;
/// Node limit of the rounding search.
const BOX_VISITS: usize = 1 << 20;
/// Share of `C_t` the rounding search tries to reach before it weighs the
/// metric.
const FILL_FRACTION: f64 = 0.98;

#[derive(Debug, Clone, PartialEq)]
pub struct MappingRow {
    pub a: f64,
    pub ranks: Vec<f64>,
    pub complexity: f64,
    pub metric: f64,
}

/// Accuracy-side argument of [`MappingTable::map_a_to_c`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccuracyTarget {
    /// Common layer metric `a ∈ [0, 1]`.
    Layer(f64),
    /// Value of the network metric.
    Network(f64),
}

#[derive(Debug, Clone)]
pub struct MappingTable {
    rows: Vec<MappingRow>,
    metric: NetworkMetric,
    /// Curves inverted along the table, per layer.
    curves: Vec<Option<LayerCurve>>,
    /// Ranks of layers outside the search.
    pinned: Vec<Option<usize>>,
}

/// Tabulates the equal-metric mapping on a uniform grid of `grid_size` points.
///
/// `pinned` gives the fixed rank of each layer that takes no part in the
/// search (`None` for searchable layers).
pub fn build_mapping(metric: &NetworkMetric, pinned: &[Option<usize>], grid_size: usize) -> Result<MappingTable> {
    if grid_size < MIN_GRID_SIZE {
        return Err(EncError::Argument(format!(
            "grid size {grid_size} below the minimum of {MIN_GRID_SIZE}"
        )));
    }
    let kind = metric.kind.mapping_curves();
    let curves = metric
        .curves()
        .get(kind)
        .ok_or_else(|| EncError::Argument(format!("{kind} curves were not built")))?
        .to_vec();
    if pinned.len() != curves.len() {
        return Err(EncError::Argument("pinned ranks and curves disagree on layer count".into()));
    }
    for (l, (c, p)) in curves.iter().zip(pinned).enumerate() {
        if c.is_none() && p.is_none() {
            return Err(EncError::Curve {
                layer: l + 1,
                message: "searchable layer has no curve".into(),
            });
        }
    }
    if curves.iter().all(Option::is_none) {
        return Err(EncError::Network("no searchable layers".into()));
    }
    let mut table = MappingTable {
        rows: Vec::new(),
        metric: metric.clone(),
        curves,
        pinned: pinned.to_vec(),
    };
    let last = (grid_size - 1) as f64;
    table.rows = (0..grid_size)
        .into_par_iter()
        .map(|i| table.row(i as f64 / last))
        .collect();
    Ok(table)
}

impl MappingTable {
    pub fn rows(&self) -> &[MappingRow] {
        &self.rows
    }

    pub fn metric(&self) -> &NetworkMetric {
        &self.metric
    }

    pub fn complexity_model(&self) -> &ComplexityModel {
        self.metric.complexity()
    }

    /// `R_e(a)`.
    pub fn ranks_at(&self, a: f64) -> Vec<f64> {
        self.curves
            .iter()
            .zip(&self.pinned)
            .map(|(c, p)| match (c, p) {
                (_, Some(r)) => *r as f64,
                (Some(c), None) => c.invert(a),
                (None, None) => unreachable!("checked at build time"),
            })
            .collect()
    }

    pub fn complexity_at(&self, a: f64) -> f64 {
        self.complexity_model().total_real(&self.ranks_at(a))
    }

    pub fn row(&self, a: f64) -> MappingRow {
        let ranks = self.ranks_at(a);
        MappingRow {
            a,
            complexity: self.complexity_model().total_real(&ranks),
            metric: self.metric.evaluate_real(&ranks),
            ranks,
        }
    }

    /// Complexity range `[C(R_e(0)), C(R_e(1))]`.
    pub fn range(&self) -> (f64, f64) {
        (self.rows[0].complexity, self.rows[self.rows.len() - 1].complexity)
    }

    fn check_in_range(&self, target: f64) -> Result<()> {
        let (lo, hi) = self.range();
        let tol = 1e-9 * hi;
        if !(target >= lo - tol && target <= hi + tol) {
            return Err(EncError::Infeasible(format!(
                "complexity {target} outside the reachable range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Solves `g(a) = target` for a nondecreasing `g` tabulated in `values`.
    fn solve(&self, target: f64, values: impl Fn(&MappingRow) -> f64, g: impl Fn(f64) -> f64) -> f64 {
        let k = self.rows.partition_point(|row| values(row) < target);
        if k == 0 {
            return self.rows[0].a;
        }
        if k == self.rows.len() {
            return self.rows[k - 1].a;
        }
        if values(&self.rows[k]) == target {
            return self.rows[k].a;
        }
        let (mut lo, mut hi) = (self.rows[k - 1].a, self.rows[k].a);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (g(lo) - target).abs() <= (g(hi) - target).abs() {
            lo
        } else {
            hi
        }
    }

    /// Common layer metric `a` with `C(R_e(a)) = C_t`.
    pub fn map_c_to_layer_metric(&self, target: f64) -> Result<f64> {
        self.check_in_range(target)?;
        Ok(self.solve(target, |row| row.complexity, |a| self.complexity_at(a)))
    }

    /// `f_{C-R}`: the real-valued equal-metric configuration of complexity `C_t`.
    pub fn map_c_to_r(&self, target: f64) -> Result<Vec<f64>> {
        self.map_c_to_layer_metric(target).map(|a| self.ranks_at(a))
    }

    /// `f_{C-A}`: the network metric of `R_e` at complexity `C_t`.
    pub fn map_c_to_a(&self, target: f64) -> Result<f64> {
        let a = self.map_c_to_layer_metric(target)?;
        Ok(self.metric.evaluate_real(&self.ranks_at(a)))
    }

    /// `f_{A-C}`: the complexity of the equal-metric configuration reaching
    /// the given accuracy target.
    pub fn map_a_to_c(&self, target: AccuracyTarget) -> Result<f64> {
        let a = match target {
            AccuracyTarget::Layer(a) => {
                if !(0.0..=1.0).contains(&a) {
                    return Err(EncError::Argument(format!("layer metric {a} outside [0, 1]")));
                }
                a
            }
            AccuracyTarget::Network(v) => {
                let lo = self.rows[0].metric;
                let hi = self.rows[self.rows.len() - 1].metric;
                if !(v >= lo && v <= hi) {
                    return Err(EncError::Infeasible(format!(
                        "metric target {v} outside the reachable range [{lo}, {hi}]"
                    )));
                }
                self.solve(v, |row| row.metric, |a| self.metric.evaluate_real(&self.ranks_at(a)))
            }
        };
        Ok(self.complexity_at(a))
    }

    /// Writes `a,complexity,ratio,metric,r_1..r_L` for every row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let err = |e: csv::Error| EncError::Argument(format!("csv: {e}"));
        let mut header = vec!["a".to_string(), "complexity".into(), "ratio".into(), "metric".into()];
        header.extend((1..=self.curves.len()).map(|l| format!("r_{l}")));
        writer.write_record(&header).map_err(err)?;
        let original = self.complexity_model().original() as f64;
        for row in &self.rows {
            let mut record = vec![
                format!("{:.6}", row.a),
                format!("{:.3}", row.complexity),
                format!("{:.6}", row.complexity / original),
                format!("{:.9}", row.metric),
            ];
            record.extend(row.ranks.iter().map(|r| format!("{r:.4}")));
            writer.write_record(&record).map_err(err)?;
        }
        writer.flush().map_err(|e| EncError::Argument(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Rounds a real rank down, treating values within a hair of an integer as
/// that integer.
pub fn floor_rank(r: f64) -> usize {
    let nearest = r.round();
    let v = if (r - nearest).abs() < INTEGER_SNAP { nearest } else { r.floor() };
    v.max(1.0) as usize
}

/// ENC-Map: the equal-metric configuration at `C_t`, rounded to integers.
///
/// Ranks are floored, then the budget left under `C_t` is spent one rank at a
/// time: first on the layers with the largest discarded fraction, then on
/// the layer whose metric is lowest, as long as an increment still fits.
/// If that spends less than 98% of `C_t`, a bounded search over ranks within
/// two of their real values takes the highest-metric configuration that
/// does, or the costliest one when none does. Targets above the reachable
/// maximum are clamped to it.
pub fn enc_map_select(table: &MappingTable, target: f64) -> Result<RankConfiguration> {
    let model = table.complexity_model();
    if target < model.floor() as f64 {
        return Err(EncError::Infeasible(format!(
            "target {target} below the smallest reachable complexity {}",
            model.floor()
        )));
    }
    let target = target.min(model.ceiling() as f64);
    let real = table.map_c_to_r(target)?;
    let max_ranks = model.max_ranks();
    let coefficients = model.coefficients();
    let mut ranks: Vec<usize> = real
        .iter()
        .zip(max_ranks)
        .map(|(&r, &m)| floor_rank(r).min(m))
        .collect();
    let budget = target.floor() as u64;
    let mut used = model.total_of(&ranks)?;
    if used > budget {
        return Err(EncError::Infeasible(format!(
            "rounded configuration costs {used}, above the target {target}"
        )));
    }
    let searchable: Vec<usize> = (0..ranks.len()).filter(|&i| table.pinned[i].is_none()).collect();

    let mut by_remainder = searchable.clone();
    by_remainder.sort_by(|&i, &j| {
        let fi = real[i] - ranks[i] as f64;
        let fj = real[j] - ranks[j] as f64;
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in &by_remainder {
        if real[i] - (ranks[i] as f64) > INTEGER_SNAP && ranks[i] < max_ranks[i] && used + coefficients[i] <= budget {
            ranks[i] += 1;
            used += coefficients[i];
        }
    }

    loop {
        let next = searchable
            .iter()
            .copied()
            .filter(|&i| ranks[i] < max_ranks[i] && used + coefficients[i] <= budget)
            .min_by(|&i, &j| {
                let yi = table.curves[i].as_ref().map_or(1.0, |c| c.value(ranks[i] as f64));
                let yj = table.curves[j].as_ref().map_or(1.0, |c| c.value(ranks[j] as f64));
                yi.total_cmp(&yj).then(i.cmp(&j))
            });
        match next {
            Some(i) => {
                ranks[i] += 1;
                used += coefficients[i];
            }
            None => break,
        }
    }

    let fill = (FILL_FRACTION * budget as f64).ceil() as u64;
    if used < fill {
        let lows: Vec<usize> = (0..ranks.len())
            .map(|l| {
                if table.pinned[l].is_some() {
                    ranks[l]
                } else {
                    ((real[l] - TRADE_RADIUS).ceil().max(1.0) as usize).min(ranks[l])
                }
            })
            .collect();
        let highs: Vec<usize> = (0..ranks.len())
            .map(|l| {
                if table.pinned[l].is_some() {
                    ranks[l]
                } else {
                    (((real[l] + TRADE_RADIUS).floor() as usize).max(ranks[l])).min(max_ranks[l])
                }
            })
            .collect();
        let score = |r: &[usize]| -> f64 {
            searchable
                .iter()
                .map(|&l| table.curves[l].as_ref().map_or(0.0, |c| c.value(r[l] as f64).max(f64::MIN_POSITIVE).ln()))
                .sum()
        };
        let mut fit = BoxFit {
            coefficients,
            lows: &lows,
            highs: &highs,
            budget,
            fill,
            suffix_min: suffix_sums(coefficients, &lows),
            suffix_max: suffix_sums(coefficients, &highs),
            best: (used, score(&ranks)),
            best_ranks: ranks.clone(),
            current: lows.clone(),
            visits: 0,
            score: &score,
        };
        fit.descend(0, 0);
        ranks = fit.best_ranks;
    }
    Ok(RankConfiguration::new(ranks))
}

fn suffix_sums(coefficients: &[u64], ranks: &[usize]) -> Vec<u64> {
    let mut out = vec![0; ranks.len() + 1];
    for l in (0..ranks.len()).rev() {
        out[l] = out[l + 1] + coefficients[l] * ranks[l] as u64;
    }
    out
}

/// Depth-first search within a box of ranks for the best configuration that
/// fits the budget: among those costing at least `fill` the higher
/// log-metric wins, below it the higher cost.
struct BoxFit<'a> {
    coefficients: &'a [u64],
    lows: &'a [usize],
    highs: &'a [usize],
    budget: u64,
    fill: u64,
    suffix_min: Vec<u64>,
    suffix_max: Vec<u64>,
    best: (u64, f64),
    best_ranks: Vec<usize>,
    current: Vec<usize>,
    visits: usize,
    score: &'a dyn Fn(&[usize]) -> f64,
}

impl BoxFit<'_> {
    fn improves(&self, cost: u64, score: f64) -> bool {
        let (best_cost, best_score) = self.best;
        match (cost >= self.fill, best_cost >= self.fill) {
            (true, true) => score > best_score || (score == best_score && cost > best_cost),
            (true, false) => true,
            (false, true) => false,
            (false, false) => cost > best_cost || (cost == best_cost && score > best_score),
        }
    }

    fn descend(&mut self, l: usize, cost: u64) {
        self.visits += 1;
        if self.visits > BOX_VISITS {
            return;
        }
        if l == self.current.len() {
            let s = (self.score)(&self.current);
            if self.improves(cost, s) {
                self.best = (cost, s);
                self.best_ranks.clone_from(&self.current);
            }
            return;
        }
        for r in (self.lows[l]..=self.highs[l]).rev() {
            let c = cost + self.coefficients[l] * r as u64;
            if c + self.suffix_min[l + 1] > self.budget {
                continue;
            }
            if c + self.suffix_max[l + 1] < self.best.0.min(self.fill) {
                break;
            }
            self.current[l] = r;
            self.descend(l + 1, c);
        }
    }
}
