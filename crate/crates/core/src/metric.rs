//! Whole-network accuracy metrics: products of per-layer curves (`A_m`,
//! `A_p`) and their complexity-weighted combination `A_c`.
//!
//! Products run in log space; a zero factor contributes `-∞`. Pinned layers
//! contribute a factor of one.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::ComplexityModel;
use crate::curve::{default_schedule, measured_curve, pca_curve, CurveKind, LayerCurve};
use crate::error::{EncError, Result};
use crate::eval::AccuracyEvaluator;
use crate::network::{NetworkSpec, RankConfiguration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Measured,
    Pca,
    Combined,
}

impl MetricKind {
    pub fn needs_measured(self) -> bool {
        matches!(self, MetricKind::Measured | MetricKind::Combined)
    }

    /// Curve family used to build the equal-metric mapping.
    pub fn mapping_curves(self) -> CurveKind {
        match self {
            MetricKind::Pca => CurveKind::Pca,
            MetricKind::Measured | MetricKind::Combined => CurveKind::Measured,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Measured => "measured",
            MetricKind::Pca => "pca",
            MetricKind::Combined => "combined",
        })
    }
}

impl FromStr for MetricKind {
    type Err = EncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(MetricKind::Measured),
            "pca" => Ok(MetricKind::Pca),
            "combined" => Ok(MetricKind::Combined),
            other => Err(EncError::Argument(format!("unknown metric '{other}'"))),
        }
    }
}

/// Depth class of a network, by number of searchable layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkScale {
    /// Up to 8 searchable layers (AlexNet-like).
    Shallow,
    /// 9 to 24 (VGG-like).
    Mid,
    /// More than 24 (ResNet-like).
    Deep,
}

impl NetworkScale {
    pub fn of(network: &NetworkSpec) -> Self {
        Self::from_count(network.compressible().len())
    }

    pub fn from_count(searchable: usize) -> Self {
        match searchable {
            0..=8 => NetworkScale::Shallow,
            9..=24 => NetworkScale::Mid,
            _ => NetworkScale::Deep,
        }
    }

    pub fn default_metric(self) -> MetricKind {
        match self {
            NetworkScale::Shallow => MetricKind::Measured,
            NetworkScale::Mid => MetricKind::Combined,
            NetworkScale::Deep => MetricKind::Pca,
        }
    }

    /// Number of candidates validated by inference-based selection.
    pub fn default_inference_count(self) -> usize {
        match self {
            NetworkScale::Shallow => 50,
            NetworkScale::Mid => 40,
            NetworkScale::Deep => 20,
        }
    }
}

/// Layer curves of every searchable layer (`None` for pinned layers).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pca: Vec<Option<LayerCurve>>,
    measured: Option<Vec<Option<LayerCurve>>>,
}

impl CurveSet {
    pub fn pca(network: &NetworkSpec) -> Result<Self> {
        let pca = (1..=network.len())
            .into_par_iter()
            .map(|l| {
                if network.is_compressible(l) {
                    pca_curve(network.layer(l)).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CurveSet { pca, measured: None })
    }

    /// PCA curves plus measured curves on the default rank schedule.
    pub fn with_measured(network: &NetworkSpec, evaluator: &dyn AccuracyEvaluator) -> Result<Self> {
        Self::with_measured_schedule(network, evaluator, &default_schedule)
    }

    pub fn with_measured_schedule(
        network: &NetworkSpec,
        evaluator: &dyn AccuracyEvaluator,
        schedule: &(dyn Fn(usize) -> Vec<usize> + Sync),
    ) -> Result<Self> {
        let mut set = Self::pca(network)?;
        let measured = (1..=network.len())
            .into_par_iter()
            .map(|l| {
                if network.is_compressible(l) {
                    let s = schedule(network.layer(l).max_rank());
                    measured_curve(l, network, evaluator, &s).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        set.measured = Some(measured);
        Ok(set)
    }

    /// Assembles a set from explicit curves; `measured` may be omitted.
    pub fn from_curves(pca: Vec<Option<LayerCurve>>, measured: Option<Vec<Option<LayerCurve>>>) -> Result<Self> {
        if let Some(m) = &measured {
            if m.len() != pca.len() {
                return Err(EncError::Argument("curve families cover different layer counts".into()));
            }
            for (p, q) in pca.iter().zip(m) {
                if p.is_some() != q.is_some() {
                    return Err(EncError::Argument("curve families cover different layers".into()));
                }
            }
        }
        Ok(CurveSet { pca, measured })
    }

    pub fn len(&self) -> usize {
        self.pca.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pca.is_empty()
    }

    pub fn get(&self, kind: CurveKind) -> Option<&[Option<LayerCurve>]> {
        match kind {
            CurveKind::Pca => Some(&self.pca),
            CurveKind::Measured => self.measured.as_deref(),
        }
    }

    pub fn has(&self, kind: CurveKind) -> bool {
        self.get(kind).is_some()
    }

    /// All curves, PCA first.
    pub fn iter(&self) -> impl Iterator<Item = &LayerCurve> {
        self.pca
            .iter()
            .flatten()
            .chain(self.measured.iter().flat_map(|m| m.iter().flatten()))
    }
}

/// Log-values of one curve family at every integer rank.
pub type LogTable = Vec<Option<Vec<f64>>>;

fn log_table(curves: &[Option<LayerCurve>]) -> LogTable {
    curves
        .iter()
        .map(|c| c.as_ref().map(|c| c.integer_values().into_iter().map(f64::ln).collect()))
        .collect()
}

/// Evaluates `A_m`, `A_p` and `A_c` over rank configurations.
#[derive(Debug, Clone)]
pub struct NetworkMetric {
    pub kind: MetricKind,
    curves: CurveSet,
    complexity: ComplexityModel,
    log_pca: LogTable,
    log_measured: Option<LogTable>,
}

impl NetworkMetric {
    pub fn new(kind: MetricKind, curves: CurveSet, complexity: ComplexityModel) -> Result<Self> {
        if kind.needs_measured() && !curves.has(CurveKind::Measured) {
            return Err(EncError::Argument(format!("metric '{kind}' needs measured curves")));
        }
        if curves.len() != complexity.len() {
            return Err(EncError::Argument("curves and complexity model disagree on layer count".into()));
        }
        let log_pca = log_table(&curves.pca);
        let log_measured = curves.measured.as_deref().map(log_table);
        Ok(NetworkMetric {
            kind,
            curves,
            complexity,
            log_pca,
            log_measured,
        })
    }

    pub fn curves(&self) -> &CurveSet {
        &self.curves
    }

    pub fn complexity(&self) -> &ComplexityModel {
        &self.complexity
    }

    pub fn log_table(&self, kind: CurveKind) -> Option<&LogTable> {
        match kind {
            CurveKind::Pca => Some(&self.log_pca),
            CurveKind::Measured => self.log_measured.as_ref(),
        }
    }

    fn log_product(&self, kind: CurveKind, ranks: &[usize]) -> Result<f64> {
        let table = self
            .log_table(kind)
            .ok_or_else(|| EncError::Argument(format!("{kind} curves were not built")))?;
        if ranks.len() != table.len() {
            return Err(EncError::Ranks(format!("{} ranks for {} layers", ranks.len(), table.len())));
        }
        let mut sum = 0.0;
        for (t, &r) in table.iter().zip(ranks) {
            if let Some(t) = t {
                sum += t.get(r).ok_or_else(|| EncError::Ranks(format!("rank {r} beyond maximum")))?;
            }
        }
        Ok(sum)
    }

    /// `A_m(R) = Π y_{m,l}(r_l)`.
    pub fn a_m(&self, ranks: &RankConfiguration) -> Result<f64> {
        self.log_product(CurveKind::Measured, ranks.ranks()).map(f64::exp)
    }

    /// `A_p(R) = Π y_{p,l}(r_l)`.
    pub fn a_p(&self, ranks: &RankConfiguration) -> Result<f64> {
        self.log_product(CurveKind::Pca, ranks.ranks()).map(f64::exp)
    }

    /// `A_c(R) = A_p(R)·C(R)/C_orig + A_m(R)`.
    pub fn a_c(&self, ranks: &RankConfiguration) -> Result<f64> {
        let ratio = self.complexity.total(ranks)? as f64 / self.complexity.original() as f64;
        Ok(self.a_p(ranks)? * ratio + self.a_m(ranks)?)
    }

    pub fn evaluate(&self, ranks: &RankConfiguration) -> Result<f64> {
        self.evaluate_kind(self.kind, ranks)
    }

    pub fn evaluate_kind(&self, kind: MetricKind, ranks: &RankConfiguration) -> Result<f64> {
        match kind {
            MetricKind::Measured => self.a_m(ranks),
            MetricKind::Pca => self.a_p(ranks),
            MetricKind::Combined => self.a_c(ranks),
        }
    }

    /// Metric of a real-valued configuration, evaluating curves between
    /// integer ranks.
    pub fn evaluate_real(&self, ranks: &[f64]) -> f64 {
        let product = |curves: &[Option<LayerCurve>]| -> f64 {
            curves
                .iter()
                .zip(ranks)
                .filter_map(|(c, &r)| c.as_ref().map(|c| c.value(r)))
                .product()
        };
        let pca = || product(&self.curves.pca);
        let measured = || product(self.curves.measured.as_deref().unwrap_or(&[]));
        match self.kind {
            MetricKind::Pca => pca(),
            MetricKind::Measured => measured(),
            MetricKind::Combined => {
                pca() * self.complexity.total_real(ranks) / self.complexity.original() as f64 + measured()
            }
        }
    }

    /// Combines partial log-products and a complexity into the metric value.
    pub fn combine(&self, log_pca: f64, log_measured: f64, complexity: u64) -> f64 {
        match self.kind {
            MetricKind::Pca => log_pca.exp(),
            MetricKind::Measured => log_measured.exp(),
            MetricKind::Combined => {
                log_pca.exp() * complexity as f64 / self.complexity.original() as f64 + log_measured.exp()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::ComplexityMode;
    use crate::network::LayerSpec;

    fn toy() -> NetworkSpec {
        let l = || LayerSpec::fully_connected("fc", 4, 4).with_singular_values(vec![4.0, 3.0, 2.0, 1.0]);
        NetworkSpec::new(vec![l(), l()]).unwrap()
    }

    fn knots(layer: usize, values: &[f64]) -> LayerCurve {
        let ranks: Vec<usize> = (1..=values.len()).collect();
        LayerCurve::from_knots(layer, CurveKind::Measured, &ranks, values).unwrap()
    }

    #[test]
    fn pca_product() {
        let net = toy();
        let metric = NetworkMetric::new(
            MetricKind::Pca,
            CurveSet::pca(&net).unwrap(),
            ComplexityModel::new(&net, ComplexityMode::Flops),
        )
        .unwrap();
        assert_eq!(metric.a_p(&RankConfiguration::new(vec![2, 2])).unwrap(), 0.25);
        assert_eq!(metric.a_p(&net.max_configuration()).unwrap(), 1.0);
        assert_eq!(metric.a_p(&RankConfiguration::new(vec![1, 3])).unwrap(), 0.0);
        assert!(metric.a_m(&net.max_configuration()).is_err());
    }

    #[test]
    fn measured_and_combined() {
        let net = toy();
        let pca = CurveSet::pca(&net).unwrap();
        // y_m(3) = 0.5 on layer 1 and 0.8 on layer 2
        let measured = vec![Some(knots(1, &[0.0, 0.2, 0.5, 1.0])), Some(knots(2, &[0.0, 0.4, 0.8, 1.0]))];
        let curves = CurveSet::from_curves(pca.get(CurveKind::Pca).unwrap().to_vec(), Some(measured)).unwrap();
        let model = ComplexityModel::from_coefficients(vec![10, 10], vec![4, 4], ComplexityMode::Flops);
        let metric = NetworkMetric::new(MetricKind::Combined, curves, model).unwrap();
        let r = RankConfiguration::new(vec![3, 3]);
        assert!((metric.a_m(&r).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(metric.a_c(&net.max_configuration()).unwrap(), 2.0);
        // a rank-1 layer leaves only the weighted PCA term, which is also 0 here
        let low = RankConfiguration::new(vec![1, 4]);
        assert_eq!(metric.a_m(&low).unwrap(), 0.0);
        let expected = metric.a_p(&low).unwrap() * 50.0 / 80.0;
        assert_eq!(metric.a_c(&low).unwrap(), expected);
        // A_p = 0.25 at [2, 2], C/C_orig = 0.5
        let half = RankConfiguration::new(vec![2, 2]);
        let a_c = metric.a_c(&half).unwrap();
        let hand = 0.25 * 0.5 + metric.a_m(&half).unwrap();
        assert!((a_c - hand).abs() < 1e-12);
    }

    #[test]
    fn scale_defaults() {
        assert_eq!(NetworkScale::from_count(5).default_metric(), MetricKind::Measured);
        assert_eq!(NetworkScale::from_count(12).default_metric(), MetricKind::Combined);
        assert_eq!(NetworkScale::from_count(54).default_metric(), MetricKind::Pca);
        assert_eq!(NetworkScale::from_count(5).default_inference_count(), 50);
        assert_eq!(NetworkScale::from_count(12).default_inference_count(), 40);
        assert_eq!(NetworkScale::from_count(54).default_inference_count(), 20);
    }
}
