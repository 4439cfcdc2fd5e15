//! End-to-end rank selection: curves, mapping, then ENC-Map, ENC-Model or
//! ENC-Inf.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::complexity::{dense_total, Budget, ComplexityMode, ComplexityModel};
use crate::curve::CurveKind;
use crate::error::{EncError, Result};
use crate::eval::AccuracyEvaluator;
use crate::mapping::{build_mapping, enc_map_select, AccuracyTarget, MappingTable, DEFAULT_GRID_SIZE};
use crate::metric::{CurveSet, MetricKind, NetworkMetric, NetworkScale};
use crate::network::{NetworkSpec, RankConfiguration};
use crate::search::{
    enc_inf_select, enc_model_select, extract_candidates, limit_space, Candidate, CandidateSet, SearchOptions,
    SecondaryBudget, StepRule,
};

/// Default `δ_s`, as a fraction of `C_orig`.
pub const DEFAULT_SPACE_MARGIN: f64 = 0.10;
/// Default `δ_m`, as a fraction of `C_t`.
pub const DEFAULT_CANDIDATE_MARGIN: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Map,
    Model,
    Inference,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Map => "map",
            Strategy::Model => "model",
            Strategy::Inference => "inf",
        })
    }
}

impl FromStr for Strategy {
    type Err = EncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Strategy::Map),
            "model" => Ok(Strategy::Model),
            "inf" | "inference" => Ok(Strategy::Inference),
            other => Err(EncError::Argument(format!("unknown strategy '{other}'"))),
        }
    }
}

/// What the selected configuration must meet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Complexity: a fraction of `C_orig` when `≤ 1`, absolute otherwise.
    Complexity(f64),
    /// Network-metric level, converted to a complexity through the inverse
    /// mapping.
    Metric(f64),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: ComplexityMode,
    pub target: Target,
    /// Parameter budget (fraction or absolute) checked alongside a FLOPs
    /// budget.
    pub secondary_target: Option<f64>,
    pub strategy: Strategy,
    /// Defaults by network depth when absent.
    pub metric: Option<MetricKind>,
    /// Candidates validated by ENC-Inf; defaults by network depth.
    pub inference_count: Option<usize>,
    /// `δ_s` as a fraction of `C_orig`.
    pub space_margin: f64,
    /// `δ_m` as a fraction of `C_t`.
    pub candidate_margin: f64,
    pub grid_size: usize,
    pub step: StepRule,
    pub search: SearchOptions,
}

impl PipelineConfig {
    pub fn new(strategy: Strategy, target: Target) -> Self {
        PipelineConfig {
            mode: ComplexityMode::Flops,
            target,
            secondary_target: None,
            strategy,
            metric: None,
            inference_count: None,
            space_margin: DEFAULT_SPACE_MARGIN,
            candidate_margin: DEFAULT_CANDIDATE_MARGIN,
            grid_size: DEFAULT_GRID_SIZE,
            step: StepRule::Auto,
            search: SearchOptions::default(),
        }
    }

    pub fn metric_kind(&self, network: &NetworkSpec) -> MetricKind {
        self.metric.unwrap_or_else(|| NetworkScale::of(network).default_metric())
    }
}

/// Evaluators for measured curves and for ENC-Inf validation.
#[derive(Clone, Copy, Default)]
pub struct Evaluators<'a> {
    pub curves: Option<&'a dyn AccuracyEvaluator>,
    pub validation: Option<&'a dyn AccuracyEvaluator>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub strategy: Strategy,
    pub metric: NetworkMetric,
    pub table: MappingTable,
    pub budget: Budget,
    pub selected: Candidate,
    pub candidates: Option<CandidateSet>,
    /// Candidates validated by ENC-Inf, in metric order.
    pub evaluated: Vec<Candidate>,
    pub curve_time: Duration,
    pub search_time: Duration,
}

/// Builds the curves needed by `kind`.
pub fn build_curves(network: &NetworkSpec, kind: MetricKind, evaluator: Option<&dyn AccuracyEvaluator>) -> Result<CurveSet> {
    if kind.needs_measured() {
        let evaluator = evaluator.ok_or_else(|| {
            EncError::Argument(format!("metric '{kind}' needs a dataset to measure layer curves"))
        })?;
        CurveSet::with_measured(network, evaluator)
    } else {
        CurveSet::pca(network)
    }
}

/// Mapping table of `network` under `metric`.
pub fn mapping_for(network: &NetworkSpec, metric: &NetworkMetric, grid_size: usize) -> Result<MappingTable> {
    let pinned: Vec<Option<usize>> = (1..=network.len()).map(|l| network.pinned_rank(l)).collect();
    build_mapping(metric, &pinned, grid_size)
}

/// Runs the selection flow for one network.
pub fn run_pipeline(network: &NetworkSpec, config: &PipelineConfig, evaluators: Evaluators<'_>) -> Result<PipelineResult> {
    if network.compressible().is_empty() {
        return Err(EncError::Network("no layer is eligible for rank search".into()));
    }
    let kind = config.metric_kind(network);
    if config.strategy == Strategy::Inference && evaluators.validation.is_none() {
        return Err(EncError::Argument("strategy 'inf' needs a dataset for validation".into()));
    }
    if config.strategy == Strategy::Map && config.secondary_target.is_some() {
        return Err(EncError::Argument(
            "ENC-Map maps a single complexity constraint; use 'model' or 'inf' for joint budgets".into(),
        ));
    }
    let started = Instant::now();
    let curves = build_curves(network, kind, evaluators.curves)?;
    let curve_time = started.elapsed();

    let started = Instant::now();
    let model = ComplexityModel::new(network, config.mode);
    let metric = NetworkMetric::new(kind, curves, model.clone())?;
    let table = mapping_for(network, &metric, config.grid_size)?;
    let target = match config.target {
        Target::Complexity(v) => Budget::resolve_target(v, model.original()),
        Target::Metric(v) => table.map_a_to_c(AccuracyTarget::Network(v))?,
    };
    let budget = Budget {
        target,
        space_margin: config.space_margin * model.original() as f64,
        candidate_margin: config.candidate_margin * target,
    };
    budget.validate(model.original())?;

    let mut candidates = None;
    let mut evaluated = Vec::new();
    let selected = match config.strategy {
        Strategy::Map => {
            let ranks = enc_map_select(&table, target)?;
            describe(&metric, ranks)?
        }
        Strategy::Model | Strategy::Inference => {
            let space = limit_space(&table, target, budget.space_margin)?.with_steps(&config.step)?;
            let mut options = config.search.clone();
            if let Some(secondary) = config.secondary_target {
                let mode = match config.mode {
                    ComplexityMode::Flops => ComplexityMode::Parameters,
                    ComplexityMode::Parameters => ComplexityMode::Flops,
                };
                let model = ComplexityModel::new(network, mode);
                let t = Budget::resolve_target(secondary, model.original());
                let b = Budget {
                    target: t,
                    space_margin: config.space_margin * model.original() as f64,
                    candidate_margin: config.candidate_margin * t,
                };
                b.validate(model.original())?;
                options.secondary = Some(SecondaryBudget { model, budget: b });
            }
            let set = extract_candidates(&metric, &space, &budget, &options)?;
            let chosen = if config.strategy == Strategy::Model {
                enc_model_select(&set)?.clone()
            } else {
                let n = config
                    .inference_count
                    .unwrap_or_else(|| NetworkScale::of(network).default_inference_count());
                let validation = evaluators.validation.expect("checked above");
                let outcome = enc_inf_select(&set, n, network, validation)?;
                evaluated = outcome.evaluated;
                outcome.best
            };
            candidates = Some(set);
            chosen
        }
    };
    Ok(PipelineResult {
        strategy: config.strategy,
        metric,
        table,
        budget,
        selected,
        candidates,
        evaluated,
        curve_time,
        search_time: started.elapsed(),
    })
}

/// Complexity and metric values of a configuration.
pub fn describe(metric: &NetworkMetric, ranks: RankConfiguration) -> Result<Candidate> {
    Ok(Candidate {
        complexity: metric.complexity().total(&ranks)?,
        secondary_complexity: None,
        metric: metric.evaluate(&ranks)?,
        a_p: metric.a_p(&ranks)?,
        a_m: metric.a_m(&ranks).ok(),
        accuracy: None,
        ranks,
    })
}

/// Baseline keeping the same fraction `ρ` of every searchable layer's rank,
/// `r_l = max(1, ⌊ρ·r_max⌋)`, with the largest `ρ` whose complexity stays
/// within `C_t`.
pub fn uniform_ratio_select(network: &NetworkSpec, model: &ComplexityModel, target: f64) -> Result<RankConfiguration> {
    let at = |rho: f64| -> RankConfiguration {
        RankConfiguration::new(
            (1..=network.len())
                .map(|l| {
                    network.pinned_rank(l).unwrap_or_else(|| {
                        let m = network.layer(l).max_rank();
                        ((rho * m as f64).floor() as usize).clamp(1, m)
                    })
                })
                .collect(),
        )
    };
    let cost = |rho: f64| model.total(&at(rho));
    if cost(0.0)? as f64 > target {
        return Err(EncError::Infeasible(format!(
            "target {target} below the smallest reachable complexity {}",
            cost(0.0)?
        )));
    }
    if cost(1.0)? as f64 <= target {
        return Ok(at(1.0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? as f64 <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(lo))
}

/// Per-layer entry of a rank-configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub index: usize,
    pub name: String,
    pub rank: usize,
    pub r_max: usize,
    pub c: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub network: String,
    pub strategy: String,
    pub metric: String,
    pub mode: String,
    pub target: f64,
    pub complexity: u64,
    pub original: u64,
    pub ratio: f64,
    pub dense: u64,
    pub dense_ratio: f64,
    pub metric_value: f64,
    pub a_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Contents of a rank-configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFile {
    pub summary: RankSummary,
    #[serde(rename = "layer")]
    pub layers: Vec<RankEntry>,
}

fn round9(v: f64) -> f64 {
    if v.is_finite() {
        (v * 1e9).round() / 1e9
    } else {
        v
    }
}

impl RankFile {
    pub fn new(network: &NetworkSpec, result: &PipelineResult) -> Self {
        let c = &result.selected;
        let model = result.metric.complexity();
        let value = |kind: CurveKind, l: usize, r: usize| {
            result
                .metric
                .curves()
                .get(kind)
                .and_then(|curves| curves[l].as_ref())
                .map(|curve| round9(curve.value(r as f64)))
        };
        let layers = network
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| RankEntry {
                index: layer.index,
                name: layer.name.clone(),
                rank: c.ranks[l],
                r_max: layer.max_rank(),
                c: model.coefficients()[l],
                y_p: value(CurveKind::Pca, l, c.ranks[l]),
                y_m: value(CurveKind::Measured, l, c.ranks[l]),
            })
            .collect();
        let dense = dense_total(network, model.mode);
        RankFile {
            summary: RankSummary {
                network: network.name.clone(),
                strategy: result.strategy.to_string(),
                metric: result.metric.kind.to_string(),
                mode: model.mode.to_string(),
                target: round9(result.budget.target),
                complexity: c.complexity,
                original: model.original(),
                ratio: round9(c.complexity as f64 / model.original() as f64),
                dense,
                dense_ratio: round9(c.complexity as f64 / dense as f64),
                metric_value: round9(c.metric),
                a_p: round9(c.a_p),
                a_m: c.a_m.map(round9),
                accuracy: c.accuracy.map(round9),
            },
            layers,
        }
    }

    pub fn ranks(&self) -> RankConfiguration {
        RankConfiguration::new(self.layers.iter().map(|e| e.rank).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EncError::Argument(format!("toml: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| EncError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EncError::io(path, e))?;
        toml::from_str(&text).map_err(|e| EncError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Reads the rank vector from a rank-configuration file and checks it
/// against `network`.
pub fn load_ranks(path: impl AsRef<Path>, network: &NetworkSpec) -> Result<RankConfiguration> {
    let file = RankFile::load(&path)?;
    if file.layers.len() != network.len() {
        return Err(EncError::Ranks(format!(
            "{} lists {} layers, network has {}",
            path.as_ref().display(),
            file.layers.len(),
            network.len()
        )));
    }
    let ranks = file.ranks();
    for (entry, layer) in file.layers.iter().zip(network.layers()) {
        if entry.rank == 0 || entry.rank > layer.max_rank() {
            return Err(EncError::Ranks(format!(
                "layer {} ({}) rank {} outside 1..={}",
                layer.index,
                layer.name,
                entry.rank,
                layer.max_rank()
            )));
        }
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Decomposition, LayerSpec};

    fn net() -> NetworkSpec {
        let sigma = |n: usize| (0..n).map(|k| 1.0 / (1.0 + k as f64)).collect::<Vec<_>>();
        let layers = vec![
            LayerSpec::convolutional("a", 8, 8, 3, 4, 8, Decomposition::Spatial).with_singular_values(sigma(12)),
            LayerSpec::convolutional("b", 8, 8, 3, 8, 8, Decomposition::Spatial).with_singular_values(sigma(24)),
            LayerSpec::fully_connected("fc", 32, 10).with_singular_values(sigma(10)),
        ];
        NetworkSpec::new(layers).unwrap().with_excluded([]).unwrap()
    }

    #[test]
    fn map_and_model_meet_budget() {
        let net = net();
        for strategy in [Strategy::Map, Strategy::Model] {
            let mut config = PipelineConfig::new(strategy, Target::Complexity(0.5));
            config.metric = Some(MetricKind::Pca);
            let result = run_pipeline(&net, &config, Evaluators::default()).unwrap();
            let c = result.selected.complexity as f64;
            match strategy {
                Strategy::Map => assert!(c <= result.budget.target),
                _ => assert!(result.budget.admits(result.selected.complexity)),
            }
        }
    }

    #[test]
    fn missing_dataset_is_reported() {
        let net = net();
        let mut config = PipelineConfig::new(Strategy::Model, Target::Complexity(0.5));
        config.metric = Some(MetricKind::Measured);
        assert!(matches!(run_pipeline(&net, &config, Evaluators::default()), Err(EncError::Argument(_))));
        let config = PipelineConfig::new(Strategy::Inference, Target::Complexity(0.5));
        assert!(run_pipeline(&net, &config, Evaluators::default()).is_err());
    }

    #[test]
    fn uniform_baseline_stays_in_budget() {
        let net = net();
        let model = ComplexityModel::new(&net, ComplexityMode::Flops);
        let target = 0.5 * model.original() as f64;
        let r = uniform_ratio_select(&net, &model, target).unwrap();
        assert!(model.total(&r).unwrap() as f64 <= target);
        assert_eq!(r.0, vec![6, 12, 5]);
    }

    #[test]
    fn rank_file_round_trip() {
        let net = net();
        let mut config = PipelineConfig::new(Strategy::Map, Target::Complexity(0.4));
        config.metric = Some(MetricKind::Pca);
        let result = run_pipeline(&net, &config, Evaluators::default()).unwrap();
        let file = RankFile::new(&net, &result);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranks.toml");
        file.save(&path).unwrap();
        assert_eq!(load_ranks(&path, &net).unwrap(), result.selected.ranks);
        assert_eq!(RankFile::load(&path).unwrap(), file);
    }
}
