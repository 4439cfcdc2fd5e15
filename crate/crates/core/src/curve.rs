//! Per-layer accuracy curves: normalized PCA energy and measured accuracy,
//! both monotone in rank with a numeric inverse.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EncError, Result};
use crate::eval::AccuracyEvaluator;
use crate::network::{LayerSpec, NetworkSpec};
use crate::pchip::Pchip;

/// Slope added per unit rank to flat runs so the inverse is single-valued.
pub const FLAT_RUN_SLOPE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Pca,
    Measured,
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Pca => "pca",
            CurveKind::Measured => "measured",
        })
    }
}

/// Normalized metric `y_l(r)` of one layer, `y(1) = 0`, `y(r_max) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurve {
    /// 1-based layer index.
    pub layer: usize,
    pub kind: CurveKind,
    max_rank: usize,
    knots: Vec<(f64, f64)>,
    interp: Pchip,
}

impl LayerCurve {
    /// Builds a curve from normalized knot values. Values are clamped to a
    /// running maximum, then flat runs get a tiny slope before interpolation.
    pub fn from_knots(layer: usize, kind: CurveKind, ranks: &[usize], values: &[f64]) -> Result<Self> {
        let err = |message: String| EncError::Curve { layer, message };
        if ranks.len() != values.len() || ranks.len() < 2 {
            return Err(err(format!("need at least two knots, got {}", ranks.len())));
        }
        if ranks[0] != 1 || ranks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(err("knot ranks must start at 1 and increase strictly".into()));
        }
        let max_rank = ranks[ranks.len() - 1];
        let repaired = running_max(values);
        let x: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
        let strict = strictly_increasing(&x, &repaired);
        let lo = strict[0];
        let hi = strict[strict.len() - 1];
        if !(hi > lo) {
            return Err(err("curve is flat; cannot normalize".into()));
        }
        let y: Vec<f64> = strict.iter().map(|v| (v - lo) / (hi - lo)).collect();
        let knots = x.iter().copied().zip(repaired).collect();
        Ok(LayerCurve {
            layer,
            kind,
            max_rank,
            knots,
            interp: Pchip::new(x, y)?,
        })
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// Knots after the running-maximum repair, before the flat-run slope.
    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// `y(r)` for real `r ∈ [1, r_max]` (clamped outside).
    pub fn value(&self, rank: f64) -> f64 {
        self.interp.eval(rank)
    }

    /// Values at every integer rank; index 0 is unused and set to 0.
    pub fn integer_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.max_rank + 1);
        v.push(0.0);
        v.extend((1..=self.max_rank).map(|r| self.value(r as f64)));
        v
    }

    /// The real rank `r` with `y(r) = a`, by bisection.
    pub fn invert(&self, a: f64) -> f64 {
        let (lo, hi) = self.interp.domain();
        if a <= 0.0 {
            return lo;
        }
        if a >= 1.0 {
            return hi;
        }
        let ys = self.interp.y();
        let xs = self.interp.x();
        let seg = ys.partition_point(|&v| v <= a) - 1;
        if ys[seg] == a {
            return xs[seg];
        }
        let (mut left, mut right) = (xs[seg], xs[seg + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (left + right);
            if mid <= left || mid >= right {
                break;
            }
            if self.value(mid) < a {
                left = mid;
            } else {
                right = mid;
            }
        }
        // whichever end is closer in value
        if (self.value(left) - a).abs() <= (self.value(right) - a).abs() {
            left
        } else {
            right
        }
    }
}

fn running_max(values: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    values
        .iter()
        .map(|&v| {
            best = best.max(v);
            best
        })
        .collect()
}

fn strictly_increasing(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    for k in 1..out.len() {
        if out[k] <= out[k - 1] {
            out[k] = out[k - 1] + FLAT_RUN_SLOPE * (x[k] - x[k - 1]);
        }
    }
    out
}

/// Min-max normalized cumulative singular-value energy at every integer rank.
pub fn pca_curve(layer: &LayerSpec) -> Result<LayerCurve> {
    let sigma = layer.singular_values.as_ref().ok_or_else(|| EncError::Curve {
        layer: layer.index,
        message: "singular values unavailable".into(),
    })?;
    if sigma.len() < 2 {
        return Err(EncError::Curve {
            layer: layer.index,
            message: "maximum rank 1; layer cannot be compressed".into(),
        });
    }
    let mut cumulative = Vec::with_capacity(sigma.len());
    let mut sum = 0.0;
    for s in sigma {
        sum += s;
        cumulative.push(sum);
    }
    let first = cumulative[0];
    let last = cumulative[cumulative.len() - 1];
    let values: Vec<f64> = cumulative.iter().map(|c| (c - first) / (last - first)).collect();
    let ranks: Vec<usize> = (1..=sigma.len()).collect();
    LayerCurve::from_knots(layer.index, CurveKind::Pca, &ranks, &values)
}

/// `{1, ⌈r/16⌉, ⌈r/8⌉, ⌈r/4⌉, ⌈r/2⌉, ⌈3r/4⌉, r}`, deduplicated.
pub fn default_schedule(max_rank: usize) -> Vec<usize> {
    let r = max_rank;
    let mut s = vec![1, r.div_ceil(16), r.div_ceil(8), r.div_ceil(4), r.div_ceil(2), (3 * r).div_ceil(4), r];
    s.sort_unstable();
    s.dedup();
    s
}

/// Measures accuracy with only `layer` truncated to each scheduled rank,
/// normalizes between rank 1 and `r_max`, repairs monotonicity and
/// interpolates.
///
/// If truncating the layer never changes accuracy the measurement carries
/// no shape information, and the PCA-energy values at the scheduled ranks
/// are used instead.
pub fn measured_curve(
    layer: usize,
    network: &NetworkSpec,
    evaluator: &dyn AccuracyEvaluator,
    schedule: &[usize],
) -> Result<LayerCurve> {
    let spec = network.layer(layer);
    let max_rank = spec.max_rank();
    let err = |message: String| EncError::Curve { layer, message };
    let mut ranks = schedule.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.len() < 2 || ranks[0] != 1 || ranks[ranks.len() - 1] != max_rank {
        return Err(err(format!(
            "schedule must contain 1 and r_max = {max_rank} (got {ranks:?})"
        )));
    }
    let base = network.base_configuration();
    let accuracies = ranks
        .par_iter()
        .map(|&r| {
            evaluator
                .evaluate(network, &base.with_rank(layer, r))
                .map_err(|e| err(format!("evaluation at rank {r} failed: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let repaired = running_max(&accuracies);
    let lo = repaired[0];
    let hi = repaired[repaired.len() - 1];
    let values: Vec<f64> = if hi > lo {
        accuracies.iter().map(|a| (a - lo) / (hi - lo)).collect()
    } else {
        let pca = pca_curve(spec)?;
        ranks.iter().map(|&r| pca.value(r as f64)).collect()
    };
    LayerCurve::from_knots(layer, CurveKind::Measured, &ranks, &values)
}

/// Writes `kind,layer,rank,value` rows at every integer rank.
pub fn write_curves_csv<'a, W: Write>(
    curves: impl IntoIterator<Item = &'a LayerCurve>,
    out: W,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let io = |e: csv::Error| EncError::Argument(format!("csv: {e}"));
    writer.write_record(["kind", "layer", "rank", "value"]).map_err(io)?;
    for curve in curves {
        for (r, v) in curve.integer_values().iter().enumerate().skip(1) {
            writer
                .write_record([
                    curve.kind.to_string(),
                    curve.layer.to_string(),
                    r.to_string(),
                    format!("{v:.9}"),
                ])
                .map_err(io)?;
        }
    }
    writer.flush().map_err(|e| EncError::Argument(format!("csv: {e}")))?;
    Ok(())
}
