//! Prompt-template compression by segment attribution.
//!
//! A template is cut into contiguous segments, every segment is scored by how
//! much it contributes to a task metric (perturbation estimators such as
//! Shapley values, leave-one-out, LASSO and greedy forward selection, or an
//! LLM-driven probe-and-rank loop), and the lowest scoring segments are
//! pruned to reach a target ratio. The LLM is only ever reached through the
//! [`gateway::Gateway`], which caches, batches and retries calls and can be
//! backed by deterministic mock oracles for offline work.

pub mod attribution;
pub mod cli;
pub mod domain;
pub mod evaluation;
pub mod gateway;
mod json;
pub mod pipeline;
pub mod prompts;
pub mod segmentation;
pub mod service;
pub mod tokens;

pub use attribution::{AttributionResult, EstimatorKind};
pub use domain::{
    parse_template, render, EvalExample, EvalTask, Mask, PromptTemplate, Segment,
    SegmentedTemplate, Split, Strategy,
};
pub use evaluation::{ndcg, score, MetricId};
pub use gateway::{CompletionRequest, Gateway};
pub use pipeline::{prune, run_procut, CompressionConfig, Engine, RunReport, TradeoffCurve};
pub use tokens::count_tokens;
