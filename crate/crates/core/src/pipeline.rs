//! Segment → attribute → prune → report, plus ratio sweeps, the vanilla
//! LLM-compression baseline and compression inside an optimisation loop.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{
    self, AttributionError, AttributionResult, Estimator, EstimatorKind, DEFAULT_EXACT_LIMIT,
    DEFAULT_LAMBDA_GRID,
};
use crate::domain::{EvalTask, Mask, PromptTemplate, Segment, SegmentedTemplate, Split, Strategy, TemplateError};
use crate::evaluation::{EvaluationError, TaskValue};
use crate::gateway::{CallLedger, Gateway, GatewayError, Phase};
use crate::json::parse_llm_json;
use crate::prompts;
use crate::segmentation::{segment, SegmentationConfig, SegmentationError};
use crate::tokens::{default_counter, TokenCounter};
use crate::attribution::ValueFunction;

fn default_ratio() -> f64 {
    0.5
}
fn default_estimator() -> Estimator {
    Estimator::Shap
}
fn default_exact_limit() -> usize {
    DEFAULT_EXACT_LIMIT
}
fn default_p_include() -> f64 {
    0.5
}
fn default_lambda_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}
fn default_t() -> usize {
    2
}
fn default_retry_limit() -> usize {
    2
}

/// Estimator hyper-parameters; unset counts scale with `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    #[serde(default = "default_exact_limit")]
    pub exact_limit: usize,
    /// Monte-Carlo Shapley orderings; defaults to `200·M`.
    #[serde(default)]
    pub n_permutations: Option<usize>,
    /// LASSO design size; defaults to `8·M`.
    #[serde(default)]
    pub n_masks: Option<usize>,
    #[serde(default = "default_p_include")]
    pub p_include: f64,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Candidate masks requested by the LLM-driven estimator.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Units to keep as told to the LLM-driven estimator; defaults to the
    /// pruning size.
    #[serde(default)]
    pub k: Option<usize>,
    /// Extra attempts after an unusable meta-call reply.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            exact_limit: DEFAULT_EXACT_LIMIT,
            n_permutations: None,
            n_masks: None,
            p_include: default_p_include(),
            lambda_grid: default_lambda_grid(),
            t: default_t(),
            k: None,
            retry_limit: default_retry_limit(),
        }
    }
}

/// Which split drives attribution and which one is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SplitPolicy {
    pub attribute: Split,
    pub report: Split,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy {
            attribute: Split::Train,
            report: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    /// Fraction of segments kept.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub estimator_options: EstimatorOptions,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    /// Segments that always survive pruning.
    #[serde(default)]
    pub pinned: BTreeSet<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splits: SplitPolicy,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            ratio: default_ratio(),
            estimator: default_estimator(),
            estimator_options: EstimatorOptions::default(),
            segmentation: SegmentationConfig::default(),
            pinned: BTreeSet::new(),
            seed: 0,
            splits: SplitPolicy::default(),
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_ratio(self.ratio)?;
        let o = &self.estimator_options;
        if !(o.p_include > 0.0 && o.p_include < 1.0) {
            return Err(PipelineError::InvalidConfig(format!("p_include {} is outside (0, 1)", o.p_include)));
        }
        if o.lambda_grid.is_empty() || o.lambda_grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(PipelineError::InvalidConfig("lambda_grid must be non-empty and strictly descending".into()));
        }
        if o.t == 0 {
            return Err(PipelineError::InvalidConfig("t must be at least 1".into()));
        }
        if self.segmentation.max_units == 0 {
            return Err(PipelineError::InvalidConfig("max_units must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<(), PipelineError> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(format!("ratio {r} is outside [0, 1]")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// Template, dataset, pins or score vectors do not fit together.
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("compressed prompt lost placeholders {missing:?}")]
    PlaceholderLost { missing: Vec<String> },
    #[error("persisting report: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// The underlying failure is a gateway call.
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            PipelineError::Gateway(e)
            | PipelineError::Segmentation(SegmentationError::Gateway(e))
            | PipelineError::Evaluation(EvaluationError::Gateway(e))
            | PipelineError::Attribution(AttributionError::Evaluation(EvaluationError::Gateway(e))) => Some(e),
            _ => None,
        }
    }
}

/// Number of segments kept: `max(⌊rM⌋, 1)`, raised to the pin count.
pub fn kept_count(m: usize, r: f64, pinned: usize) -> usize {
    // the epsilon keeps products like 0.3·10 from flooring to 2
    let k = (r * m as f64 + 1e-9).floor() as usize;
    k.max(1).max(pinned).min(m)
}

/// Mask keeping the pins plus the best-scoring segments (ties to the lower
/// index), `kept_count` in total.
pub fn prune_mask(scores: &[f64], r: f64, pinned: &BTreeSet<usize>) -> Result<Mask, PipelineError> {
    check_ratio(r)?;
    let m = scores.len();
    if let Some(&bad) = pinned.iter().find(|&&j| j >= m) {
        return Err(PipelineError::Mismatch(format!("pinned segment {bad} does not exist (M = {m})")));
    }
    let k = kept_count(m, r, pinned.len());
    let mut keep = pinned.clone();
    for j in crate::evaluation::rank_desc(scores) {
        if keep.len() >= k {
            break;
        }
        keep.insert(j);
    }
    Ok(Mask::from_indices(m, keep))
}

/// Keeps the top segments of `attr` at ratio `r`; retained segments keep
/// their original order.
pub fn prune(
    seg: &SegmentedTemplate,
    attr: &AttributionResult,
    r: f64,
    pinned: &BTreeSet<usize>,
) -> Result<(SegmentedTemplate, Mask), PipelineError> {
    if attr.len() != seg.len() {
        return Err(PipelineError::Mismatch(format!(
            "{} scores for {} segments",
            attr.len(),
            seg.len()
        )));
    }
    let mask = prune_mask(&attr.scores, r, pinned)?;
    Ok((seg.restrict(&mask)?, mask))
}

/// Pipeline stage, also the run status reported by the service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Segmenting,
    Attributing,
    Pruning,
    Evaluating,
    Done,
    Failed,
}

impl RunStatus {
    pub fn progress(self) -> f64 {
        match self {
            RunStatus::Queued => 0.0,
            RunStatus::Segmenting => 0.05,
            RunStatus::Attributing => 0.15,
            RunStatus::Pruning => 0.8,
            RunStatus::Evaluating => 0.85,
            RunStatus::Done | RunStatus::Failed => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RunReport {
    pub run_id: String,
    pub original_template: String,
    pub compressed_template: String,
    pub strategy: Strategy,
    pub segments: Vec<Segment>,
    pub kept_mask: Mask,
    pub k: usize,
    pub attribution: AttributionResult,
    /// Scores on the report split.
    pub score_before: f64,
    pub score_after: f64,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub token_reduction: f64,
    pub config: CompressionConfig,
    pub ledger: CallLedger,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// What is left of a run that hit a fatal error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FailedRun {
    pub run_id: String,
    pub stage: RunStatus,
    pub error: String,
    pub config: CompressionConfig,
    pub ledger: CallLedger,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// Contents of `runs/<run_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StoredRun {
    Done(Box<RunReport>),
    Failed(Box<FailedRun>),
}

impl StoredRun {
    pub fn run_id(&self) -> &str {
        match self {
            StoredRun::Done(r) => &r.run_id,
            StoredRun::Failed(f) => &f.run_id,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io(e.into()))
    }
}

#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: PipelineError,
    pub report: Box<FailedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct CurvePoint {
    pub ratio: f64,
    pub k: usize,
    pub kept_mask: Mask,
    pub tokens_after: usize,
    /// `1 − tokens_after / tokens_before`.
    pub token_reduction: f64,
    pub test_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct TradeoffCurve {
    pub points: Vec<CurvePoint>,
    pub score_before: f64,
    pub tokens_before: usize,
    pub attribution: AttributionResult,
}

/// Runs pipelines against one gateway, optionally persisting reports.
#[derive(Clone)]
pub struct Engine {
    gw: Arc<Gateway>,
    runs_dir: Option<PathBuf>,
    counter: Arc<dyn TokenCounter>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("runs_dir", &self.runs_dir).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(gw: Arc<Gateway>) -> Self {
        Engine {
            gw,
            runs_dir: None,
            counter: default_counter(),
        }
    }

    pub fn with_runs_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.runs_dir = Some(dir.into());
        self
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gw
    }

    pub fn runs_dir(&self) -> Option<&Path> {
        self.runs_dir.as_deref()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    /// Content hash identifying a run.
    pub fn run_id(&self, template: &PromptTemplate, task: &EvalTask, config: &CompressionConfig) -> String {
        let mut hasher = Sha256::new();
        for part in [
            template.raw_text().to_string(),
            serde_json::to_string(task).expect("task serializes"),
            serde_json::to_string(config).expect("config serializes"),
            self.gw.model().to_string(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn run(
        &self,
        template: &PromptTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
    ) -> Result<RunReport, RunFailure> {
        self.run_with_progress(template, task, config, &|_| {})
    }

    /// Runs the pipeline, calling `progress` as each stage starts. The
    /// finished or failed record is written to the runs directory.
    pub fn run_with_progress(
        &self,
        template: &PromptTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
        progress: &(dyn Fn(RunStatus) + Sync),
    ) -> Result<RunReport, RunFailure> {
        let run_id = self.run_id(template, task, config);
        let started_at_ms = self.gw.clock().now_ms();
        let before = self.gw.ledger();
        let mut stage = RunStatus::Queued;
        let outcome = self.stages(template, task, config, &run_id, started_at_ms, &before, &mut |s| {
            stage = s;
            progress(s);
        });
        match outcome {
            Ok(report) => {
                if let Err(error) = self.persist(&StoredRun::Done(Box::new(report.clone()))) {
                    return Err(self.fail(run_id, stage, error, config, &before, started_at_ms));
                }
                Ok(report)
            }
            Err(error) => Err(self.fail(run_id, stage, error, config, &before, started_at_ms)),
        }
    }

    fn fail(
        &self,
        run_id: String,
        stage: RunStatus,
        error: PipelineError,
        config: &CompressionConfig,
        before: &CallLedger,
        started_at_ms: u64,
    ) -> RunFailure {
        let report = Box::new(FailedRun {
            run_id,
            stage,
            error: error.to_string(),
            config: config.clone(),
            ledger: self.gw.ledger().since(before),
            started_at_ms,
            finished_at_ms: self.gw.clock().now_ms(),
        });
        if let Err(e) = self.persist(&StoredRun::Failed(report.clone())) {
            tracing::error!(error = %e, "could not persist failed run");
        }
        RunFailure { error, report }
    }

    #[allow(clippy::too_many_arguments)]
    fn stages(
        &self,
        template: &PromptTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
        run_id: &str,
        started_at_ms: u64,
        before: &CallLedger,
        progress: &mut dyn FnMut(RunStatus),
    ) -> Result<RunReport, PipelineError> {
        config.validate()?;
        task.check_against(template)
            .map_err(|e| PipelineError::Mismatch(e.to_string()))?;

        progress(RunStatus::Segmenting);
        let seg = self.segment(template, config)?;

        progress(RunStatus::Attributing);
        let attribution = self.attribute(&seg, task, config)?;

        progress(RunStatus::Pruning);
        let (compressed, kept_mask) = prune(&seg, &attribution, config.ratio, &config.pinned)?;

        progress(RunStatus::Evaluating);
        let report_value = self.value(&seg, task, config.splits.report);
        let scores = report_value.evaluate(&[Mask::full(seg.len()), kept_mask.clone()])?;
        let tokens_before = self.counter.count(seg.source().raw_text());
        let tokens_after = self.counter.count(compressed.source().raw_text());

        Ok(RunReport {
            run_id: run_id.to_string(),
            original_template: template.raw_text().to_string(),
            compressed_template: compressed.source().raw_text().to_string(),
            strategy: seg.strategy(),
            segments: seg.segments().to_vec(),
            k: kept_mask.count_ones(),
            kept_mask,
            attribution,
            score_before: scores[0],
            score_after: scores[1],
            tokens_before,
            tokens_after,
            token_reduction: reduction(tokens_before, tokens_after),
            config: config.clone(),
            ledger: self.gw.ledger().since(before),
            started_at_ms,
            finished_at_ms: self.gw.clock().now_ms(),
        })
    }

    pub fn segment(&self, template: &PromptTemplate, config: &CompressionConfig) -> Result<SegmentedTemplate, PipelineError> {
        let seg = segment(template, &config.segmentation, Some(&self.gw))?;
        if let Some(&bad) = config.pinned.iter().find(|&&j| j >= seg.len()) {
            return Err(PipelineError::Mismatch(format!(
                "pinned segment {bad} does not exist; the template has {} segments",
                seg.len()
            )));
        }
        let pinned: Vec<usize> = config.pinned.iter().copied().collect();
        Ok(seg.with_pinned(&pinned))
    }

    fn value(&self, seg: &SegmentedTemplate, task: &EvalTask, split: Split) -> TaskValue {
        TaskValue::new(seg.clone(), Arc::new(task.clone()), split, self.gw.clone())
    }

    /// Runs the configured estimator on the attribution split.
    pub fn attribute(
        &self,
        seg: &SegmentedTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
    ) -> Result<AttributionResult, PipelineError> {
        let before = self.gw.ledger();
        let v = self.value(seg, task, config.splits.attribute);
        let mut result = estimate(seg, &v, &self.gw, config)?;
        result.ledger = self.gw.ledger().since(&before);
        Ok(result)
    }

    /// One attribution pass pruned at every ratio in `ratios`.
    pub fn sweep(
        &self,
        template: &PromptTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
        ratios: &[f64],
    ) -> Result<TradeoffCurve, PipelineError> {
        if ratios.is_empty() {
            return Err(PipelineError::InvalidConfig("no ratios to sweep".into()));
        }
        for &r in ratios {
            check_ratio(r)?;
        }
        config.validate()?;
        task.check_against(template)
            .map_err(|e| PipelineError::Mismatch(e.to_string()))?;
        let mut ratios = ratios.to_vec();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();

        let seg = self.segment(template, config)?;
        let attribution = self.attribute(&seg, task, config)?;
        let masks: Vec<Mask> = ratios
            .iter()
            .map(|&r| prune_mask(&attribution.scores, r, &config.pinned))
            .collect::<Result<_, _>>()?;
        let mut all = vec![Mask::full(seg.len())];
        all.extend(masks.iter().cloned());
        let scores = self.value(&seg, task, config.splits.report).evaluate(&all)?;
        let tokens_before = self.counter.count(seg.source().raw_text());
        let points = ratios
            .iter()
            .zip(&masks)
            .zip(&scores[1..])
            .map(|((&ratio, mask), &test_score)| {
                let tokens_after = self.counter.count(seg.restrict(mask)?.source().raw_text());
                Ok(CurvePoint {
                    ratio,
                    k: mask.count_ones(),
                    kept_mask: mask.clone(),
                    tokens_after,
                    token_reduction: reduction(tokens_before, tokens_after),
                    test_score,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(TradeoffCurve {
            points,
            score_before: scores[0],
            tokens_before,
            attribution,
        })
    }

    /// Baseline: the LLM rewrites the template to about `r` of its tokens.
    pub fn vanilla_llm_compress(
        &self,
        template: &PromptTemplate,
        r: f64,
        retry_limit: usize,
    ) -> Result<PromptTemplate, PipelineError> {
        vanilla_llm_compress(template, r, &self.gw, retry_limit, self.counter.as_ref())
    }

    /// Alternates an external optimiser step with compression for
    /// `iterations` rounds, feeding each compressed template to the next
    /// step.
    pub fn compress_in_loop(
        &self,
        step: &mut dyn FnMut(&PromptTemplate, usize) -> PromptTemplate,
        template: &PromptTemplate,
        task: &EvalTask,
        config: &CompressionConfig,
        iterations: usize,
    ) -> Result<Vec<RunReport>, RunFailure> {
        let mut current = template.clone();
        let mut reports = Vec::with_capacity(iterations);
        for round in 0..iterations {
            let grown = step(&current, round);
            let report = self.run(&grown, task, config)?;
            current = PromptTemplate::parse(&report.compressed_template).expect("pruned templates parse");
            reports.push(report);
        }
        Ok(reports)
    }

    fn persist(&self, run: &StoredRun) -> Result<(), PipelineError> {
        let Some(dir) = &self.runs_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", run.run_id()));
        let tmp = dir.join(format!(".{}.json.tmp", run.run_id()));
        std::fs::write(&tmp, serde_json::to_string_pretty(run).expect("report serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn reduction(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

/// Dispatches to the configured estimator.
pub fn estimate(
    seg: &SegmentedTemplate,
    v: &dyn ValueFunction,
    gw: &Gateway,
    config: &CompressionConfig,
) -> Result<AttributionResult, PipelineError> {
    let m = seg.len();
    let o = &config.estimator_options;
    let seed = config.seed;
    let mut result = match config.estimator.resolve(m, o.exact_limit) {
        EstimatorKind::ShapExact => attribution::shap_exact(v, o.exact_limit)?,
        EstimatorKind::ShapMc => attribution::shap_mc(v, o.n_permutations.unwrap_or(200 * m), seed)?,
        EstimatorKind::Loo => attribution::loo(v)?,
        EstimatorKind::Lasso => {
            attribution::lasso_attribution(v, o.n_masks.unwrap_or(8 * m), seed, o.p_include, &o.lambda_grid)?
        }
        EstimatorKind::Greedy => attribution::greedy_forward(v)?,
        EstimatorKind::LlmRanker => {
            let k = o.k.unwrap_or_else(|| kept_count(m, config.ratio, config.pinned.len()));
            attribution::llm_ranker(seg, v, gw, o.t, k, o.retry_limit)?
        }
        EstimatorKind::Random => attribution::random_attribution(m, seed),
    };
    result.rng_seed = seed;
    Ok(result)
}

#[derive(Deserialize)]
struct CompressedReply {
    compressed_prompt: String,
}

pub fn vanilla_llm_compress(
    template: &PromptTemplate,
    r: f64,
    gw: &Gateway,
    retry_limit: usize,
    counter: &dyn TokenCounter,
) -> Result<PromptTemplate, PipelineError> {
    check_ratio(r)?;
    if r >= 1.0 {
        return Ok(template.clone());
    }
    let base = prompts::compress(template, r, counter);
    let mut prompt = base.clone();
    let mut missing = Vec::new();
    for attempt in 0..=retry_limit {
        let reply = gw.complete(Phase::Compression, &gw.request(prompt.clone()))?;
        let outcome = parse_llm_json::<CompressedReply>(&reply)
            .map_err(|e| format!("reply is not the requested JSON ({e})"))
            .and_then(|c| PromptTemplate::parse(&c.compressed_prompt).map_err(|e| e.to_string()))
            .and_then(|t| {
                missing = template
                    .placeholders()
                    .iter()
                    .filter(|p| !t.placeholders().contains(p))
                    .cloned()
                    .collect();
                if missing.is_empty() {
                    Ok(t)
                } else {
                    Err(format!("placeholders {missing:?} are missing"))
                }
            });
        match outcome {
            Ok(t) => return Ok(t),
            Err(reason) => {
                tracing::warn!(attempt, %reason, "rejected compressed prompt");
                prompt = prompts::with_feedback(&base, attempt + 1, &reason);
            }
        }
    }
    if missing.is_empty() {
        missing = template.placeholders().to_vec();
    }
    Err(PipelineError::PlaceholderLost { missing })
}

/// Segment → attribute → prune → report with default engine settings.
pub fn run_procut(
    template: &PromptTemplate,
    task: &EvalTask,
    config: &CompressionConfig,
    gw: Arc<Gateway>,
) -> Result<RunReport, RunFailure> {
    Engine::new(gw).run(template, task, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{parse_template, EvalExample, Strategy};
    use crate::evaluation::MetricId;
    use crate::gateway::mock::{MockOracle, Rule, ScriptedOracle, SetFunction, SyntheticOracle};
    use proptest::prelude::*;

    #[test]
    fn kept_counts() {
        assert_eq!([0.25, 0.5, 0.75].map(|r| kept_count(4, r, 0)), [1, 2, 3]);
        assert_eq!(kept_count(4, 0.0, 0), 1);
        assert_eq!(kept_count(10, 0.3, 0), 3);
        assert_eq!(kept_count(4, 0.25, 3), 3);
        assert_eq!(kept_count(4, 1.0, 0), 4);
    }

    #[test]
    fn prune_examples() {
        let mask = prune_mask(&[0.9, 0.1, 0.5, 0.3], 0.5, &BTreeSet::new()).unwrap();
        assert_eq!(mask, Mask::from_indices(4, [0, 2]));
        let pinned: BTreeSet<usize> = [1].into();
        let mask = prune_mask(&[0.9, 0.1, 0.5, 0.3], 0.5, &pinned).unwrap();
        assert_eq!(mask, Mask::from_indices(4, [0, 1]));
        // ties go to the lower index
        assert_eq!(prune_mask(&[0.2; 3], 0.34, &BTreeSet::new()).unwrap(), Mask::from_indices(3, [0]));
        assert!(prune_mask(&[0.2; 3], 1.5, &BTreeSet::new()).is_err());
        assert!(prune_mask(&[0.2; 3], 0.5, &[5].into()).is_err());
    }

    #[test]
    fn prune_identity_at_full_ratio() {
        let t = parse_template("A. B {q}. C.").unwrap();
        let seg = SegmentedTemplate::new(t.clone(), ["A. ", "B {q}. ", "C."], Strategy::Structural).unwrap();
        let attr = attribution::random_attribution(3, 1);
        let (out, mask) = prune(&seg, &attr, 1.0, &BTreeSet::new()).unwrap();
        assert_eq!(out.source(), &t);
        assert_eq!(mask, Mask::full(3));
    }

    proptest! {
        #[test]
        fn prune_properties(
            scores in prop::collection::vec(-1.0f64..1.0, 1..12),
            r in 0.0f64..=1.0,
            pin_bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let m = scores.len();
            let pinned: BTreeSet<usize> = (0..m).filter(|&j| pin_bits[j] && j % 3 == 0).collect();
            let mask = prune_mask(&scores, r, &pinned).unwrap();
            prop_assert_eq!(mask.count_ones(), kept_count(m, r, pinned.len()));
            for j in &pinned {
                prop_assert!(mask.get(*j));
            }
            // every dropped unpinned segment scores no higher than every kept unpinned one
            for d in (0..m).filter(|&j| !mask.get(j)) {
                for k in (0..m).filter(|&j| mask.get(j) && !pinned.contains(&j)) {
                    prop_assert!(scores[k] > scores[d] || (scores[k] == scores[d] && k < d));
                }
            }
        }

        #[test]
        fn pruned_token_count_never_grows(
            words in prop::collection::vec("[a-z]{1,5}[.,!]? ?", 1..10),
            bits in prop::collection::vec(any::<bool>(), 10),
        ) {
            let text: String = words.concat();
            let t = parse_template(&text).unwrap();
            let seg = SegmentedTemplate::new(t, words.clone(), Strategy::Predefined).unwrap();
            let mut bits = bits[..words.len()].to_vec();
            bits[0] = true;
            let sub = seg.restrict(&Mask::from_bits(bits)).unwrap();
            prop_assert!(crate::tokens::count_tokens(sub.source().raw_text()) <= crate::tokens::count_tokens(&text));
        }
    }

    fn synthetic_fixture(weights: &[f64]) -> (PromptTemplate, EvalTask, Arc<Gateway>) {
        let m = weights.len();
        let signatures: Vec<String> = (0..m).map(|j| format!("[S{j}]")).collect();
        let oracle = SyntheticOracle::new(signatures.clone(), SetFunction::additive(weights));
        let reference = oracle.reference_text();
        let raw: String = signatures.iter().map(|s| format!("{s} rule.\n---SEGMENT---\n")).collect::<String>() + "Q: {q}";
        let task = EvalTask::single(
            (0..2).map(|i| EvalExample::new([("q", format!("x{i}"))], reference.clone())).collect(),
            MetricId::TokenF1,
        );
        (parse_template(&raw).unwrap(), task, Arc::new(Gateway::mock(MockOracle::synthetic(oracle))))
    }

    fn predefined(config: CompressionConfig) -> CompressionConfig {
        CompressionConfig {
            segmentation: SegmentationConfig {
                strategy: Strategy::Predefined,
                ..Default::default()
            },
            ..config
        }
    }

    #[test]
    fn run_keeps_best_segments() {
        let (t, task, gw) = synthetic_fixture(&[0.1, 0.4, 0.2, 0.3]);
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(gw).with_runs_dir(dir.path());
        // segment 4 (the question) carries no weight; pin it
        let config = predefined(CompressionConfig {
            ratio: 0.6,
            estimator: Estimator::ShapExact,
            pinned: [4].into(),
            ..Default::default()
        });
        let report = engine.run(&t, &task, &config).unwrap();
        assert_eq!(report.kept_mask, Mask::from_indices(5, [1, 3, 4]));
        assert_eq!(report.compressed_template, "\n[S1] rule.\n\n[S3] rule.\n\nQ: {q}");
        assert!((report.score_before - 1.0).abs() < 1e-9);
        assert!((report.score_after - 0.7).abs() < 1e-9);
        assert!(report.tokens_after < report.tokens_before);
        let stored = StoredRun::load(dir.path().join(format!("{}.json", report.run_id))).unwrap();
        assert_eq!(stored, StoredRun::Done(Box::new(report.clone())));

        // full ratio is the identity
        let full = engine.run(&t, &task, &CompressionConfig { ratio: 1.0, ..config }).unwrap();
        assert_eq!(full.score_after, full.score_before);
        assert_eq!(full.tokens_after, full.tokens_before);
    }

    #[test]
    fn progress_is_forward_only() {
        let (t, task, gw) = synthetic_fixture(&[0.5, 0.5]);
        let seen = std::sync::Mutex::new(Vec::new());
        Engine::new(gw)
            .run_with_progress(&t, &task, &predefined(CompressionConfig::default()), &|s| seen.lock().unwrap().push(s))
            .unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen, [RunStatus::Segmenting, RunStatus::Attributing, RunStatus::Pruning, RunStatus::Evaluating]);
    }

    #[test]
    fn failures_are_persisted() {
        let t = parse_template("A. {q}").unwrap();
        let task = EvalTask::single(vec![EvalExample::new([("q", "x")], "y")], MetricId::ExactMatch);
        let gw = Arc::new(Gateway::mock(MockOracle::scripted(Default::default())));
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(gw).with_runs_dir(dir.path());
        let failure = engine.run(&t, &task, &CompressionConfig::default()).unwrap_err();
        assert!(failure.error.gateway_error().is_some(), "{}", failure.error);
        assert_eq!(failure.report.stage, RunStatus::Attributing);
        let stored = StoredRun::load(dir.path().join(format!("{}.json", failure.report.run_id))).unwrap();
        assert!(matches!(stored, StoredRun::Failed(_)));

        let bad = EvalTask::single(vec![EvalExample::new([("other", "x")], "y")], MetricId::ExactMatch);
        let failure = engine.run(&t, &bad, &CompressionConfig::default()).unwrap_err();
        assert!(matches!(failure.error, PipelineError::Mismatch(_)));
        let failure = engine
            .run(&t, &task, &CompressionConfig { ratio: 1.5, ..Default::default() })
            .unwrap_err();
        assert!(matches!(failure.error, PipelineError::InvalidConfig(_)));
    }

    #[test]
    fn sweep_reuses_one_attribution() {
        let (t, task, gw) = synthetic_fixture(&[0.1, 0.4, 0.2, 0.3]);
        let engine = Engine::new(gw.clone());
        let config = predefined(CompressionConfig {
            estimator: Estimator::Loo,
            ..Default::default()
        });
        let curve = engine.sweep(&t, &task, &config, &[0.75, 0.25, 0.5]).unwrap();
        let ks: Vec<usize> = curve.points.iter().map(|p| p.k).collect();
        // five segments: floor(0.25·5)=1, floor(0.5·5)=2, floor(0.75·5)=3
        assert_eq!(ks, [1, 2, 3]);
        for w in curve.points.windows(2) {
            assert!(w[0].ratio < w[1].ratio);
            assert!(w[0].test_score <= w[1].test_score);
        }
        for p in &curve.points {
            let alone = prune_mask(&curve.attribution.scores, p.ratio, &BTreeSet::new()).unwrap();
            assert_eq!(alone, p.kept_mask);
        }
        assert_eq!(curve.attribution.mask_evaluations, 6);
    }

    fn compress_gateway(reply: &str) -> Gateway {
        Gateway::mock(MockOracle::Scripted(ScriptedOracle {
            rules: vec![Rule {
                contains: prompts::COMPRESS_HEAD.into(),
                response: reply.into(),
            }],
            ..Default::default()
        }))
    }

    #[test]
    fn vanilla_compress() {
        let t = parse_template("Please answer carefully and precisely: {question}").unwrap();
        let gw = compress_gateway(r#"{"compressed_prompt": "Answer: {question}"}"#);
        let out = vanilla_llm_compress(&t, 0.5, &gw, 2, &crate::tokens::DefaultCounter).unwrap();
        assert_eq!(out.raw_text(), "Answer: {question}");

        let gw = compress_gateway(r#"{"compressed_prompt": "Answer."}"#);
        let err = vanilla_llm_compress(&t, 0.5, &gw, 2, &crate::tokens::DefaultCounter).unwrap_err();
        assert!(matches!(err, PipelineError::PlaceholderLost { ref missing } if missing == &["question"]));
        assert_eq!(gw.ledger().compression.calls, 3);

        let gw = compress_gateway("unused");
        assert_eq!(vanilla_llm_compress(&t, 1.0, &gw, 2, &crate::tokens::DefaultCounter).unwrap(), t);
        assert_eq!(gw.ledger().lookups, 0);
    }

    #[test]
    fn loop_rounds() {
        let (t, task, gw) = synthetic_fixture(&[0.5, 0.5]);
        let engine = Engine::new(gw);
        let config = predefined(CompressionConfig::default());
        let mut step = |t: &PromptTemplate, _: usize| t.clone();
        assert!(engine.compress_in_loop(&mut step, &t, &task, &config, 0).unwrap().is_empty());
    }
}
