//! `enc`: rank selection for SVD-compressed networks from the command line.

use std::fs::{self, File};
use std::io::BufWriter;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use enc_core::curve::write_curves_csv;
use enc_core::decompose::decompose_network;
use enc_core::network::{load_network, save_network};
use enc_core::pipeline::{
    build_curves, describe, load_ranks, mapping_for, uniform_ratio_select,
    DEFAULT_CANDIDATE_MARGIN, DEFAULT_SPACE_MARGIN,
};
use enc_core::search::{
    write_candidates_csv, StepRule, DEFAULT_BEAM, DEFAULT_GROUP_SIZE, DEFAULT_MAX_CANDIDATES,
    DEFAULT_TOP_DIMENSION,
};
use enc_core::{
    enc_map_select, AccuracyEvaluator, AnalyticOracle, Budget, ComplexityMode, ComplexityModel,
    DatasetFile, EncError, Evaluators, MetricKind, MiniEvaluator, NetworkMetric, NetworkSpec,
    PipelineConfig, PipelineResult, RankFile, SearchOptions, Strategy, Target,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_FAILURE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "enc",
    version,
    about = "Per-layer SVD rank selection under complexity or accuracy budgets"
)]
struct Cli {
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layer table and per-layer accuracy curves.
    Metrics(MetricsArgs),
    /// ENC-Map: ranks read off the complexity-metric mapping.
    Map(MapArgs),
    /// ENC-Model or ENC-Inf: candidate search inside a complexity window.
    Search(SearchArgs),
    /// Factorizes a network at a rank configuration.
    Decompose(DecomposeArgs),
    /// Trade-off table of complexity, metric and measured accuracy.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvaluatorKind {
    Mini,
    Oracle,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SearchStrategy {
    Model,
    Inf,
}

#[derive(Args)]
struct NetworkArgs {
    /// Network description (TOML).
    #[arg(long)]
    network: PathBuf,
    /// Binary dataset with train and validation splits.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mini")]
    evaluator: EvaluatorKind,
    /// Layers kept dense, replacing the network's own list (1-based, comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "no_exclude")]
    exclude: Vec<usize>,
    /// Search every layer, ignoring the network's excluded list.
    #[arg(long)]
    no_exclude: bool,
    /// Pins a layer rank, `layer=rank`; repeatable.
    #[arg(long = "fix", value_parser = parse_fix)]
    fix: Vec<(usize, usize)>,
    /// Validation items used by the mini evaluator; all by default.
    #[arg(long)]
    eval_items: Option<usize>,
    /// Seed for validation subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Goal {
    /// Complexity budget: a fraction of C_orig when at most 1, absolute otherwise.
    #[arg(long)]
    target: Option<f64>,
    /// Network-metric level, converted to a budget through the inverse mapping.
    #[arg(long)]
    accuracy: Option<f64>,
}

impl Goal {
    fn target(&self) -> Target {
        match (self.target, self.accuracy) {
            (Some(c), _) => Target::Complexity(c),
            (None, Some(a)) => Target::Metric(a),
            (None, None) => unreachable!("clap requires one of the two"),
        }
    }
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, value_parser = parse_mode, default_value = "flops")]
    mode: ComplexityMode,
    /// pca, measured or combined; chosen by depth when absent.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    /// Points of the mapping grid.
    #[arg(long, default_value_t = enc_core::mapping::DEFAULT_GRID_SIZE)]
    grid_size: usize,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    goal: Goal,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    goal: Goal,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum, default_value = "model")]
    strategy: SearchStrategy,
    /// Parameter budget checked alongside a FLOPs budget (fraction or absolute).
    #[arg(long)]
    target_params: Option<f64>,
    /// Candidates validated by ENC-Inf; chosen by depth when absent.
    #[arg(long)]
    n: Option<usize>,
    /// Choices kept per distinct cost in each group; 0 keeps all.
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    /// Rank step: `auto`, one value for every layer, or a comma-separated list.
    #[arg(long, default_value = "auto", value_parser = parse_step)]
    step: StepRule,
    /// Explicit group of layers `a-b` (1-based, inclusive); repeatable.
    #[arg(long = "group", value_parser = parse_group)]
    group: Vec<RangeInclusive<usize>>,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_DIMENSION)]
    top_dim: usize,
    /// Half-width of the rank window, as a fraction of C_orig.
    #[arg(long, default_value_t = DEFAULT_SPACE_MARGIN)]
    space_margin: f64,
    /// Half-width of the candidate window, as a fraction of the target.
    #[arg(long, default_value_t = DEFAULT_CANDIDATE_MARGIN)]
    candidate_margin: f64,
    /// Best candidates retained; 0 keeps all.
    #[arg(long, default_value_t = DEFAULT_MAX_CANDIDATES)]
    max_candidates: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    net: NetworkArgs,
    /// Rank-configuration file written by `map` or `search`.
    #[arg(long)]
    ranks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Complexity fractions of C_orig to tabulate.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    fractions: Vec<f64>,
    /// Extra rank-configuration files to include.
    #[arg(long = "ranks")]
    ranks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<ComplexityMode, EncError> {
    s.parse()
}

fn parse_metric(s: &str) -> Result<MetricKind, EncError> {
    s.parse()
}

fn parse_fix(s: &str) -> Result<(usize, usize), String> {
    let (l, r) = s
        .split_once('=')
        .ok_or_else(|| format!("expected layer=rank, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(l)?, parse(r)?))
}

fn parse_step(s: &str) -> Result<StepRule, String> {
    if s == "auto" {
        return Ok(StepRule::Auto);
    }
    let steps = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if steps.contains(&0) {
        return Err("steps must be at least 1".into());
    }
    Ok(match steps.as_slice() {
        [t] => StepRule::Uniform(*t),
        _ => StepRule::PerLayer(steps),
    })
}

fn parse_group(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a == 0 || b < a {
        return Err(format!("bad layer range '{s}'"));
    }
    Ok(a..=b)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let started = Instant::now();
    let outcome = match cli.command {
        Command::Metrics(args) => metrics(args),
        Command::Map(args) => map(args),
        Command::Search(args) => search(args),
        Command::Decompose(args) => decompose(args),
        Command::Report(args) => report(args),
    };
    match outcome {
        Ok(()) => {
            println!("wall-clock {:.3} s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<EncError>() {
        Some(enc) if enc.is_infeasible() => EXIT_INFEASIBLE,
        Some(
            EncError::Io { .. }
            | EncError::Parse { .. }
            | EncError::Layer { .. }
            | EncError::Network(_)
            | EncError::Ranks(_)
            | EncError::Shape(_)
            | EncError::Argument(_),
        ) => EXIT_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn input(message: impl Into<String>) -> anyhow::Error {
    EncError::Argument(message.into()).into()
}

type Evaluator = Option<Box<dyn AccuracyEvaluator>>;

/// Network with command-line overrides applied, plus its evaluators.
struct Loaded {
    net: NetworkSpec,
    curves: Evaluator,
    validation: Evaluator,
}

impl Loaded {
    fn evaluators(&self) -> Evaluators<'_> {
        Evaluators {
            curves: self.curves.as_deref(),
            validation: self.validation.as_deref(),
        }
    }
}

fn load(args: &NetworkArgs) -> Result<Loaded> {
    let mut net = load_network(&args.network)?;
    if args.no_exclude {
        net.set_excluded([])?;
    } else if !args.exclude.is_empty() {
        net.set_excluded(args.exclude.iter().copied())?;
    }
    for &(layer, rank) in &args.fix {
        net.set_fixed_rank(layer, rank)?;
    }
    let (curves, validation): (Evaluator, Evaluator) = match args.evaluator {
        EvaluatorKind::Oracle => {
            if args.dataset.is_some() {
                return Err(input("--evaluator oracle takes no dataset"));
            }
            (
                Some(Box::new(AnalyticOracle::unit(&net)?)),
                Some(Box::new(AnalyticOracle::unit(&net)?)),
            )
        }
        EvaluatorKind::Mini => match &args.dataset {
            None => (None, None),
            Some(path) => {
                let data = DatasetFile::load(path)?;
                let mut validation = data.validation;
                if let Some(n) = args.eval_items {
                    if n == 0 || n > validation.len() {
                        return Err(input(format!(
                            "--eval-items must lie in 1..={}",
                            validation.len()
                        )));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    let mut picked =
                        rand::seq::index::sample(&mut rng, validation.len(), n).into_vec();
                    picked.sort_unstable();
                    validation = validation.subset(&picked);
                }
                (
                    Some(Box::new(MiniEvaluator::new(&net, data.train)?)),
                    Some(Box::new(MiniEvaluator::new(&net, validation)?)),
                )
            }
        },
    };
    Ok(Loaded {
        net,
        curves,
        validation,
    })
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    let file = File::create(&path).map_err(|e| EncError::Io { path, source: e })?;
    Ok(BufWriter::new(file))
}

fn pipeline_config(strategy: Strategy, goal: &Goal, metric: &MetricArgs) -> PipelineConfig {
    let mut config = PipelineConfig::new(strategy, goal.target());
    config.mode = metric.mode;
    config.metric = metric.metric;
    config.grid_size = metric.grid_size;
    config
}

fn print_selection(result: &PipelineResult, file: &RankFile) {
    let s = &file.summary;
    println!(
        "{} / {} metric / {}: C = {} ({:.4} of C_orig {}, {:.4} of dense {}), target {:.1}",
        s.strategy,
        s.metric,
        s.mode,
        s.complexity,
        s.ratio,
        s.original,
        s.dense_ratio,
        s.dense,
        result.budget.target
    );
    print!("metric {:.6}  A_p {:.6}", s.metric_value, s.a_p);
    if let Some(a_m) = s.a_m {
        print!("  A_m {a_m:.6}");
    }
    if let Some(acc) = s.accuracy {
        print!("  accuracy {acc:.4}");
    }
    println!();
    let ranks: Vec<String> = file.layers.iter().map(|l| l.rank.to_string()).collect();
    println!("ranks [{}]", ranks.join(", "));
    println!(
        "curves {:.3} s, search {:.3} s",
        result.curve_time.as_secs_f64(),
        result.search_time.as_secs_f64()
    );
}

fn write_selection(result: &PipelineResult, net: &NetworkSpec, out: &Path) -> Result<RankFile> {
    create_dir(out)?;
    let file = RankFile::new(net, result);
    file.save(out.join("ranks.toml"))?;
    result.table.write_csv(create(out.join("mapping.csv"))?)?;
    Ok(file)
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let loaded = load(&args.net)?;
    let net = &loaded.net;
    let kind = args
        .metric
        .metric
        .unwrap_or_else(|| enc_core::NetworkScale::of(net).default_metric());
    let curves = build_curves(net, kind, loaded.curves.as_deref())?;
    let flops = ComplexityModel::new(net, ComplexityMode::Flops);
    let params = ComplexityModel::new(net, ComplexityMode::Parameters);
    create_dir(&args.out)?;
    write_curves_csv(curves.iter(), create(args.out.join("curves.csv"))?)?;

    println!(
        "{:>5}  {:<16} {:<8} {:>6} {:>12} {:>10}  search",
        "layer", "name", "kind", "r_max", "c_flops", "c_params"
    );
    for (l, layer) in net.layers().iter().enumerate() {
        let role = match net.pinned_rank(layer.index) {
            None => "yes".to_string(),
            Some(r) if net.excluded().contains(&layer.index) => format!("excluded ({r})"),
            Some(r) => format!("fixed at {r}"),
        };
        println!(
            "{:>5}  {:<16} {:<8} {:>6} {:>12} {:>10}  {}",
            layer.index,
            layer.name,
            format!("{:?}", layer.decomposition).to_lowercase(),
            layer.max_rank(),
            flops.coefficients()[l],
            params.coefficients()[l],
            role
        );
    }
    println!(
        "C_orig: {} flops, {} params; default metric {}; curves written for {}",
        flops.original(),
        params.original(),
        enc_core::NetworkScale::of(net).default_metric(),
        kind
    );
    Ok(())
}

fn map(args: MapArgs) -> Result<()> {
    let loaded = load(&args.net)?;
    let config = pipeline_config(Strategy::Map, &args.goal, &args.metric);
    let result = enc_core::run_pipeline(&loaded.net, &config, loaded.evaluators())?;
    let file = write_selection(&result, &loaded.net, &args.out)?;
    print_selection(&result, &file);
    Ok(())
}

fn search(args: SearchArgs) -> Result<()> {
    let loaded = load(&args.net)?;
    let strategy = match args.strategy {
        SearchStrategy::Model => Strategy::Model,
        SearchStrategy::Inf => Strategy::Inference,
    };
    if args.n.is_some() && strategy != Strategy::Inference {
        return Err(input("--n applies to --strategy inf"));
    }
    if args.target_params.is_some() && args.metric.mode != ComplexityMode::Flops {
        return Err(input("--target-params pairs with --mode flops"));
    }
    let mut config = pipeline_config(strategy, &args.goal, &args.metric);
    config.secondary_target = args.target_params;
    config.inference_count = args.n;
    config.space_margin = args.space_margin;
    config.candidate_margin = args.candidate_margin;
    config.step = args.step.clone();
    let mut grouping = enc_core::search::GroupingOptions {
        group_size: args.group_size,
        top_dimension: args.top_dim,
        groups: None,
    };
    if !args.group.is_empty() {
        grouping.groups = Some(args.group.clone());
    }
    config.search = SearchOptions {
        beam: (args.beam > 0).then_some(args.beam),
        grouping,
        max_candidates: (args.max_candidates > 0).then_some(args.max_candidates),
        secondary: None,
    };
    let result = enc_core::run_pipeline(&loaded.net, &config, loaded.evaluators())?;
    let file = write_selection(&result, &loaded.net, &args.out)?;
    let set = result
        .candidates
        .as_ref()
        .expect("search strategies keep their candidates");
    let mut rows = set.candidates.clone();
    for c in &result.evaluated {
        if let Some(row) = rows.iter_mut().find(|r| r.ranks == c.ranks) {
            row.accuracy = c.accuracy;
        }
    }
    write_candidates_csv(
        &rows,
        result.metric.complexity().original(),
        create(args.out.join("candidates.csv"))?,
    )?;
    print_selection(&result, &file);
    println!(
        "{} candidates, {} tuples visited, top dimension {}",
        set.len(),
        set.summary.visited,
        set.summary.top_dimension
    );
    Ok(())
}

fn decompose(args: DecomposeArgs) -> Result<()> {
    let loaded = load(&args.net)?;
    let net = &loaded.net;
    let ranks = load_ranks(&args.ranks, net)?;
    let (factorized, report) = decompose_network(net, &ranks)?;
    create_dir(&args.out)?;
    report.write_csv(create(args.out.join("report.csv"))?)?;
    save_network(
        &factorized,
        args.out.join("factorized.toml"),
        "factorized.bin",
    )?;
    println!("{report}");
    if let (Some(validation), EvaluatorKind::Mini) = (&loaded.validation, args.net.evaluator) {
        let truncated = validation.evaluate(net, &ranks)?;
        let dense = validation.evaluate(net, &net.max_configuration())?;
        println!("validation accuracy: dense {dense:.4}, truncated {truncated:.4}");
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let loaded = load(&args.net)?;
    let net = &loaded.net;
    if let Some(bad) = args.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(input(format!("fraction {bad} outside (0, 1]")));
    }
    let kind = args
        .metric
        .metric
        .unwrap_or_else(|| enc_core::NetworkScale::of(net).default_metric());
    let curves = build_curves(net, kind, loaded.curves.as_deref())?;
    let model = ComplexityModel::new(net, args.metric.mode);
    let metric = NetworkMetric::new(kind, curves, model.clone())?;
    let table = mapping_for(net, &metric, args.metric.grid_size)?;
    let dense = enc_core::complexity::dense_total(net, args.metric.mode);

    let mut rows: Vec<(String, String, enc_core::Candidate)> = Vec::new();
    for &fraction in &args.fractions {
        let target = Budget::resolve_target(fraction, model.original());
        let label = format!("{fraction}");
        for (method, ranks) in [
            ("enc-map", enc_map_select(&table, target)),
            ("uniform", uniform_ratio_select(net, &model, target)),
        ] {
            match ranks {
                Ok(ranks) => {
                    rows.push((label.clone(), method.to_string(), describe(&metric, ranks)?))
                }
                Err(e) if e.is_infeasible() => eprintln!("skipping {method} at {fraction}: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    for path in &args.ranks {
        let ranks = load_ranks(path, net)?;
        rows.push((
            String::new(),
            path.display().to_string(),
            describe(&metric, ranks)?,
        ));
    }
    if let Some(validation) = &loaded.validation {
        for (_, _, c) in rows.iter_mut() {
            c.accuracy = Some(validation.evaluate(net, &c.ranks)?);
        }
    }

    create_dir(&args.out)?;
    let mut writer = csv::Writer::from_writer(create(args.out.join("tradeoff.csv"))?);
    writer.write_record([
        "fraction",
        "method",
        "complexity",
        "ratio",
        "dense_ratio",
        "metric",
        "a_p",
        "a_m",
        "accuracy",
        "ranks",
    ])?;
    println!(
        "{:>8}  {:<12} {:>8} {:>10} {:>10} {:>9}",
        "fraction", "method", "ratio", "dense", "metric", "accuracy"
    );
    for (fraction, method, c) in &rows {
        let ratio = c.complexity as f64 / model.original() as f64;
        let dense_ratio = c.complexity as f64 / dense as f64;
        let ranks: Vec<String> = c.ranks.iter().map(|r| r.to_string()).collect();
        writer.write_record([
            fraction.clone(),
            method.clone(),
            c.complexity.to_string(),
            format!("{ratio:.6}"),
            format!("{dense_ratio:.6}"),
            format!("{:.9e}", c.metric),
            format!("{:.9e}", c.a_p),
            c.a_m.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            c.accuracy.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ranks.join(" "),
        ])?;
        println!(
            "{:>8}  {:<12} {:>8.4} {:>10.4} {:>10.6} {:>9}",
            fraction,
            method,
            ratio,
            dense_ratio,
            c.metric,
            c.accuracy
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    writer.flush()?;
    Ok(())
}
