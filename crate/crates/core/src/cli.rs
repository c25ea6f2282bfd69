//! The `procut` command line: argument parsing, config-file merging and the
//! subcommand bodies. The binary only sets up logging and maps the returned
//! [`CliError`] to an exit code.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, AttributionResult, Estimator};
use crate::domain::{parse_template, DatasetError, EvalTask, PromptTemplate, Strategy};
use crate::evaluation::{EvaluationError, MetricId, NdcgError};
use crate::gateway::{Gateway, MockOracle, OpenAiBackend, DEFAULT_BASE_URL};
use crate::pipeline::{CompressionConfig, Engine, PipelineError, RunReport};
use crate::segmentation::{segment, SegmentationConfig, SegmentationError};
use crate::service::{self, AppState, SegmentResponse, SegmentView, DEFAULT_MAX_CONCURRENT_RUNS};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

/// A failed command and the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Help or version output requested; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Gateway(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Gateway(_) => EXIT_GATEWAY,
            CliError::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.gateway_error().is_some() {
            return CliError::Gateway(e.to_string());
        }
        match e {
            PipelineError::InvalidConfig(m) => CliError::Usage(m),
            PipelineError::Segmentation(s) => s.into(),
            PipelineError::Attribution(a) => a.into(),
            PipelineError::Mismatch(_) | PipelineError::PlaceholderLost { .. } => CliError::Mismatch(e.to_string()),
            PipelineError::Evaluation(EvaluationError::EmptySplit(_)) => CliError::Mismatch(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SegmentationError> for CliError {
    fn from(e: SegmentationError) -> Self {
        match e {
            SegmentationError::Gateway(_) | SegmentationError::NoGateway => CliError::Gateway(e.to_string()),
            SegmentationError::ZeroMaxUnits | SegmentationError::EmptyMarker => CliError::Usage(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Evaluation(EvaluationError::Gateway(_))
            | AttributionError::InvalidMaskShape(_)
            | AttributionError::InvalidRanking(_) => CliError::Gateway(e.to_string()),
            AttributionError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Mismatch(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::UnknownInput(_) => CliError::Mismatch(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Human,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "procut", version, about = "Compress prompt templates by segment attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a template into segments and print them with token counts.
    Segment(SegmentArgs),
    /// Score every segment against a dataset.
    Attribute(RunArgs),
    /// Segment, attribute, prune and report.
    Compress(CompressArgs),
    /// Attribute once and report the token/score trade-off at several ratios.
    Sweep(SweepArgs),
    /// NDCG of an estimated attribution against a gold one.
    Ndcg(NdcgArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Flags shared by every command that reaches an LLM.
#[derive(Debug, Clone, Default, Args)]
pub struct GatewayArgs {
    /// TOML file with defaults for any flag; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API (token from PROCUT_API_KEY).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// JSON file describing a mock oracle to answer instead of an endpoint.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Concurrent upstream requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// JSONL response cache shared between runs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub output: Option<OutputFormat>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SegmentationArgs {
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub max_units: Option<usize>,
    #[arg(long)]
    pub marker: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    #[arg(short = 't', long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub segmentation: SegmentationArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(short = 't', long)]
    pub template: Option<PathBuf>,
    /// JSONL dataset with `inputs`, `reference` and optional `split`.
    #[arg(short = 'd', long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<MetricId>,
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<Estimator>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidate masks for the LLM-driven estimator.
    #[arg(long = "t")]
    pub t: Option<usize>,
    /// Target segment count recorded by the LLM-driven estimator (defaults to the ratio's k).
    #[arg(long = "k")]
    pub k: Option<usize>,
    /// Segment index exempt from pruning; repeatable.
    #[arg(long = "pin")]
    pub pins: Vec<usize>,
    #[command(flatten)]
    pub segmentation: SegmentationArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fraction of segments kept, in [0, 1].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Directory receiving `<run_id>.json`.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct NdcgArgs {
    /// Attribution under test (AttributionResult, RunReport or score array).
    pub estimated: PathBuf,
    /// Gold attribution, same formats.
    pub gold: PathBuf,
    #[arg(long, value_enum)]
    pub output: Option<OutputFormat>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_concurrent_runs: Option<usize>,
    #[command(flatten)]
    pub gateway: GatewayArgs,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown strategy {s:?} (predefined, structural, llm)"))
}

fn parse_metric(s: &str) -> Result<MetricId, String> {
    s.parse()
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.parse()
}

/// Contents of a `--config` TOML file. Every key mirrors a flag; the
/// `compression` table is a full compression config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub template: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub metric: Option<MetricId>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub mock: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub cache: Option<PathBuf>,
    pub output: Option<OutputFormat>,
    pub listen: Option<SocketAddr>,
    pub runs_dir: Option<PathBuf>,
    pub max_concurrent_runs: Option<usize>,
    pub compression: Option<CompressionConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("reading config {}: {e}", path.display())))?;
        let mut config: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.template,
            &mut config.dataset,
            &mut config.mock,
            &mut config.cache,
            &mut config.runs_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

fn load_file_config(gw: &GatewayArgs) -> Result<FileConfig, CliError> {
    gw.config.as_deref().map(FileConfig::load).transpose().map(Option::unwrap_or_default)
}

/// Gateway settings after merging flags over the config file.
#[derive(Debug, Clone, Default)]
struct GatewaySettings {
    endpoint: Option<String>,
    model: Option<String>,
    mock: Option<PathBuf>,
    parallelism: Option<usize>,
    cache: Option<PathBuf>,
}

impl GatewaySettings {
    fn merge(flags: &GatewayArgs, file: &FileConfig) -> Self {
        GatewaySettings {
            endpoint: flags.endpoint.clone().or_else(|| file.endpoint.clone()),
            model: flags.model.clone().or_else(|| file.model.clone()),
            mock: flags.mock.clone().or_else(|| file.mock.clone()),
            parallelism: flags.parallelism.or(file.parallelism),
            cache: flags.cache.clone().or_else(|| file.cache.clone()),
        }
    }

    /// `None` when neither a mock nor an endpoint is configured.
    fn build(&self) -> Result<Option<Gateway>, CliError> {
        let gw = if let Some(path) = &self.mock {
            let oracle = MockOracle::from_file(path).map_err(|e| CliError::Input(e.to_string()))?;
            Gateway::mock(oracle)
        } else if let Some(endpoint) = &self.endpoint {
            Gateway::new(Arc::new(OpenAiBackend::from_env(endpoint.clone())))
        } else {
            return Ok(None);
        };
        let mut gw = gw;
        if let Some(model) = &self.model {
            gw = gw.with_model(model.clone());
        }
        if let Some(p) = self.parallelism {
            if p == 0 {
                return Err(CliError::Usage("--parallelism must be at least 1".into()));
            }
            gw = gw.with_parallelism(p);
        }
        if let Some(cache) = &self.cache {
            gw = gw.with_cache_file(cache).map_err(|e| CliError::Input(e.to_string()))?;
        }
        Ok(Some(gw))
    }

    fn require(&self) -> Result<Gateway, CliError> {
        self.build()?.ok_or_else(|| {
            CliError::Gateway(format!(
                "no LLM configured: pass --mock <oracle.json> or --endpoint <url> (e.g. {DEFAULT_BASE_URL})"
            ))
        })
    }
}

fn read_template(path: Option<&Path>) -> Result<PromptTemplate, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("a template is required (-t/--template)".into()))?;
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("reading template {}: {e}", path.display())))?;
    parse_template(&raw).map_err(|e| CliError::Input(format!("template {}: {e}", path.display())))
}

fn read_task(path: Option<&Path>, metric: MetricId, template: &PromptTemplate) -> Result<EvalTask, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("a dataset is required (-d/--dataset)".into()))?;
    let task = EvalTask::from_jsonl_file(path, metric)?;
    task.check_against(template)?;
    Ok(task)
}

fn merge_segmentation(base: SegmentationConfig, flags: &SegmentationArgs) -> SegmentationConfig {
    SegmentationConfig {
        strategy: flags.strategy.unwrap_or(base.strategy),
        max_units: flags.max_units.unwrap_or(base.max_units),
        marker: flags.marker.clone().unwrap_or(base.marker),
        ..base
    }
}

fn merge_compression(file: &FileConfig, run: &RunArgs, ratio: Option<f64>) -> CompressionConfig {
    let base = file.compression.clone().unwrap_or_default();
    let mut options = base.estimator_options.clone();
    if let Some(t) = run.t {
        options.t = t;
    }
    if run.k.is_some() {
        options.k = run.k;
    }
    let mut pinned = base.pinned.clone();
    pinned.extend(run.pins.iter().copied());
    CompressionConfig {
        ratio: ratio.unwrap_or(base.ratio),
        estimator: run.estimator.unwrap_or(base.estimator),
        estimator_options: options,
        segmentation: merge_segmentation(base.segmentation.clone(), &run.segmentation),
        pinned,
        seed: run.seed.unwrap_or(base.seed),
        splits: base.splits,
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|e| CliError::Input(format!("writing output: {e}")))
}

fn line(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::Input(format!("writing output: {e}")))
}

fn preview(text: &str) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() > 72 {
        format!("{}…", flat.chars().take(71).collect::<String>())
    } else {
        flat
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.exit_code() == 0 => return Err(CliError::Info(e.render().to_string())),
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    match cli.command {
        Command::Segment(a) => cmd_segment(&a, out),
        Command::Attribute(a) => cmd_attribute(&a, out),
        Command::Compress(a) => cmd_compress(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Ndcg(a) => cmd_ndcg(&a, out),
        Command::Serve(a) => cmd_serve(&a, out),
    }
}

pub fn cmd_segment(args: &SegmentArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = load_file_config(&args.gateway)?;
    let template = read_template(args.template.as_deref().or(file.template.as_deref()))?;
    let base = file.compression.as_ref().map(|c| c.segmentation.clone()).unwrap_or_default();
    let config = merge_segmentation(base, &args.segmentation);
    let settings = GatewaySettings::merge(&args.gateway, &file);
    let gw = if config.strategy == Strategy::Llm { Some(settings.require()?) } else { settings.build()? };
    let seg = segment(&template, &config, gw.as_ref())?;
    let count = crate::tokens::count_tokens;
    let response = SegmentResponse {
        strategy: seg.strategy(),
        source: seg.source().raw_text().to_string(),
        total_tokens: count(seg.source().raw_text()),
        segments: seg
            .segments()
            .iter()
            .map(|s| SegmentView {
                tokens: count(&s.text),
                segment: s.clone(),
            })
            .collect(),
    };
    match args.gateway.output.or(file.output).unwrap_or_default() {
        OutputFormat::Json => emit(out, &response),
        OutputFormat::Human => {
            line(out, format!("{} segments ({:?}), {} tokens", response.segments.len(), response.strategy, response.total_tokens))?;
            for s in &response.segments {
                line(out, format!("[{:>2}] {:>5} tok  {}", s.segment.index, s.tokens, preview(&s.segment.text)))?;
            }
            Ok(())
        }
    }
}

struct Prepared {
    template: PromptTemplate,
    task: EvalTask,
    config: CompressionConfig,
    engine: Engine,
    output: OutputFormat,
}

fn prepare(run: &RunArgs, ratio: Option<f64>, runs_dir: Option<&Path>) -> Result<Prepared, CliError> {
    let file = load_file_config(&run.gateway)?;
    let config = merge_compression(&file, run, ratio);
    config.validate()?;
    let template = read_template(run.template.as_deref().or(file.template.as_deref()))?;
    let metric = run.metric.or(file.metric).unwrap_or(MetricId::TokenF1);
    let task = read_task(run.dataset.as_deref().or(file.dataset.as_deref()), metric, &template)?;
    let gw = GatewaySettings::merge(&run.gateway, &file).require()?;
    let mut engine = Engine::new(Arc::new(gw));
    if let Some(dir) = runs_dir.map(Path::to_path_buf).or(file.runs_dir.clone()) {
        engine = engine.with_runs_dir(dir);
    }
    Ok(Prepared {
        template,
        task,
        config,
        engine,
        output: run.gateway.output.or(file.output).unwrap_or_default(),
    })
}

pub fn cmd_attribute(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let p = prepare(args, None, None)?;
    let seg = p.engine.segment(&p.template, &p.config)?;
    let result = p.engine.attribute(&seg, &p.task, &p.config)?;
    match p.output {
        OutputFormat::Json => emit(out, &result),
        OutputFormat::Human => {
            line(out, format!("{:?} over {} segments, {} masks evaluated, {} upstream calls",
                result.estimator, result.len(), result.mask_evaluations, result.ledger.total_calls))?;
            for (s, score) in seg.segments().iter().zip(&result.scores) {
                line(out, format!("[{:>2}] {:>+9.4}  {}", s.index, score, preview(&s.text)))?;
            }
            Ok(())
        }
    }
}

pub fn cmd_compress(args: &CompressArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let runs_dir = args.runs_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let p = prepare(&args.run, args.ratio, Some(&runs_dir))?;
    let report = p.engine.run(&p.template, &p.task, &p.config).map_err(|f| CliError::from(f.error))?;
    let path = p.engine.runs_dir().expect("runs dir set").join(format!("{}.json", report.run_id));
    tracing::info!(path = %path.display(), "report written");
    match p.output {
        OutputFormat::Json => emit(out, &report),
        OutputFormat::Human => print_summary(out, &report, &path),
    }
}

fn print_summary(out: &mut dyn Write, r: &RunReport, path: &Path) -> Result<(), CliError> {
    line(out, format!("report: {}", path.display()))?;
    line(out, format!("kept {} of {} segments ({:?})", r.k, r.segments.len(), r.attribution.estimator))?;
    line(out, format!("tokens {} -> {} ({:.1}% fewer)", r.tokens_before, r.tokens_after, 100.0 * r.token_reduction))?;
    line(out, format!("score  {:.4} -> {:.4}", r.score_before, r.score_after))?;
    line(out, format!("upstream calls {} (cache hits {})", r.ledger.total_calls, r.ledger.cache_hits))
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let p = prepare(&args.run, None, None)?;
    let curve = p.engine.sweep(&p.template, &p.task, &p.config, &args.ratios)?;
    match p.output {
        OutputFormat::Json => emit(out, &curve),
        OutputFormat::Human => {
            line(out, format!("full template: {} tokens, score {:.4}", curve.tokens_before, curve.score_before))?;
            line(out, "ratio    k  tokens  reduction   score")?;
            for pt in &curve.points {
                line(out, format!("{:>5.2} {:>4} {:>7} {:>9.1}% {:>7.4}",
                    pt.ratio, pt.k, pt.tokens_after, 100.0 * pt.token_reduction, pt.test_score))?;
            }
            Ok(())
        }
    }
}

/// Accepts an attribution result, a run report or a bare score array.
fn read_scores(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("reading {}: {e}", path.display())))?;
    if let Ok(r) = serde_json::from_str::<AttributionResult>(&text) {
        return Ok(r.scores);
    }
    if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
        return Ok(r.attribution.scores);
    }
    serde_json::from_str::<Vec<f64>>(&text)
        .map_err(|_| CliError::Input(format!("{} holds neither an attribution, a run report nor a score array", path.display())))
}

pub fn cmd_ndcg(args: &NdcgArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let estimated = read_scores(&args.estimated)?;
    let gold = read_scores(&args.gold)?;
    let value = crate::evaluation::ndcg_scores(&estimated, &gold).map_err(|e| match e {
        NdcgError::LengthMismatch { .. } => CliError::Mismatch(e.to_string()),
        NdcgError::DegenerateGold => CliError::Mismatch(e.to_string()),
    })?;
    match args.output.unwrap_or_default() {
        OutputFormat::Json => emit(out, &serde_json::json!({ "ndcg": value })),
        OutputFormat::Human => line(out, format!("{value:.6}")),
    }
}

pub fn cmd_serve(args: &ServeArgs, _out: &mut dyn Write) -> Result<(), CliError> {
    let file = load_file_config(&args.gateway)?;
    let gw = GatewaySettings::merge(&args.gateway, &file).require()?;
    let listen = args
        .listen
        .or(file.listen)
        .unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080)));
    let runs_dir = args.runs_dir.clone().or(file.runs_dir).unwrap_or_else(|| PathBuf::from("runs"));
    let max = args.max_concurrent_runs.or(file.max_concurrent_runs).unwrap_or(DEFAULT_MAX_CONCURRENT_RUNS);
    let engine = Engine::new(Arc::new(gw)).with_runs_dir(runs_dir);
    let state = AppState::new(engine, max).map_err(|e| CliError::Input(format!("runs directory: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Input(e.to_string()))?;
    runtime
        .block_on(service::serve(listen, state))
        .map_err(|e| CliError::Input(format!("serving on {listen}: {e}")))
}
