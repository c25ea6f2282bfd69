//! Segment attribution: every estimator turns a value function `v(mask)`
//! into one score per segment.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Mask;
use crate::evaluation::EvaluationError;
use crate::gateway::{CallLedger, GatewayError};

mod lasso;
mod perturbation;
mod ranker;
mod shapley;

pub use lasso::{fit_lasso, lasso_attribution, sample_masks, LassoFit, DEFAULT_LAMBDA_GRID};
pub use perturbation::{brute_force_best, greedy_forward, loo, random_attribution};
pub use ranker::{llm_ranker, ranking_scores, RankerState};
pub use shapley::{shap_exact, shap_mc};

/// Largest `M` for which subsets are enumerated exhaustively.
pub const DEFAULT_EXACT_LIMIT: usize = 12;

/// Mean task score of a masked template, evaluated a batch at a time.
pub trait ValueFunction: Send + Sync {
    fn num_segments(&self) -> usize;
    fn evaluate(&self, masks: &[Mask]) -> Result<Vec<f64>, EvaluationError>;
}

/// A plain closure over masks, for set functions known in closed form.
pub struct FnValue<F> {
    m: usize,
    f: F,
}

impl<F: Fn(&Mask) -> f64 + Send + Sync> FnValue<F> {
    pub fn new(m: usize, f: F) -> Self {
        FnValue { m, f }
    }
}

impl<F: Fn(&Mask) -> f64 + Send + Sync> ValueFunction for FnValue<F> {
    fn num_segments(&self) -> usize {
        self.m
    }

    fn evaluate(&self, masks: &[Mask]) -> Result<Vec<f64>, EvaluationError> {
        Ok(masks.iter().map(|m| (self.f)(m)).collect())
    }
}

/// Estimator recorded on a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ShapExact,
    ShapMc,
    Loo,
    Lasso,
    Greedy,
    LlmRanker,
    Random,
}

/// Estimator requested in a configuration. `shap` enumerates exactly up to
/// the exact limit and samples permutations above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Shap,
    ShapExact,
    ShapMc,
    Loo,
    Lasso,
    Greedy,
    LlmRanker,
    Random,
}

impl Estimator {
    pub fn resolve(self, m: usize, exact_limit: usize) -> EstimatorKind {
        match self {
            Estimator::Shap if m <= exact_limit => EstimatorKind::ShapExact,
            Estimator::Shap | Estimator::ShapMc => EstimatorKind::ShapMc,
            Estimator::ShapExact => EstimatorKind::ShapExact,
            Estimator::Loo => EstimatorKind::Loo,
            Estimator::Lasso => EstimatorKind::Lasso,
            Estimator::Greedy => EstimatorKind::Greedy,
            Estimator::LlmRanker => EstimatorKind::LlmRanker,
            Estimator::Random => EstimatorKind::Random,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let normalized = s.replace('-', "_");
        serde_json::from_value(serde_json::Value::String(normalized))
            .map_err(|_| format!("unknown estimator {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ProbeRecord {
    pub mask: Mask,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AttributionResult {
    pub scores: Vec<f64>,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub rng_seed: u64,
    /// Gateway activity while the estimator ran (empty for closed-form `v`).
    #[serde(default)]
    pub ledger: CallLedger,
    /// Every distinct mask evaluated, in first-evaluation order.
    #[serde(default)]
    pub probe_log: Vec<ProbeRecord>,
    #[serde(default)]
    pub mask_evaluations: usize,
    /// Mask-proposal and ranking calls (LLM-driven estimator only).
    #[serde(default)]
    pub meta_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranker: Option<RankerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lasso: Option<LassoFit>,
}

impl AttributionResult {
    pub(crate) fn new(scores: Vec<f64>, estimator: EstimatorKind, rng_seed: u64, probe: Probe<'_>) -> Self {
        let probe_log = probe.into_log();
        AttributionResult {
            scores,
            estimator,
            rng_seed,
            ledger: CallLedger::default(),
            mask_evaluations: probe_log.len(),
            probe_log,
            meta_calls: 0,
            ranker: None,
            lasso: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("{found} segments exceed the exhaustive limit of {limit}")]
    TooManySegments { found: usize, limit: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("LASSO fit is all zero at every lambda although targets vary")]
    AllZeroFit,
    #[error("mask proposals unusable after retries: {0}")]
    InvalidMaskShape(String),
    #[error("ranking unusable after retries: {0}")]
    InvalidRanking(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

impl From<GatewayError> for AttributionError {
    fn from(e: GatewayError) -> Self {
        AttributionError::Evaluation(EvaluationError::Gateway(e))
    }
}

/// Memoizing view of a value function that logs each distinct mask once.
pub(crate) struct Probe<'a> {
    v: &'a dyn ValueFunction,
    memo: HashMap<Mask, f64>,
    log: Vec<ProbeRecord>,
}

impl<'a> Probe<'a> {
    pub(crate) fn new(v: &'a dyn ValueFunction) -> Self {
        Probe {
            v,
            memo: HashMap::new(),
            log: Vec::new(),
        }
    }

    pub(crate) fn m(&self) -> usize {
        self.v.num_segments()
    }

    /// Values for `masks`; unseen masks go to `v` in one batch.
    pub(crate) fn values(&mut self, masks: &[Mask]) -> Result<Vec<f64>, AttributionError> {
        let mut fresh: Vec<Mask> = Vec::new();
        let mut queued: HashSet<&Mask> = HashSet::new();
        for mask in masks {
            if mask.len() != self.m() {
                return Err(AttributionError::DimensionMismatch(format!(
                    "mask of length {} for {} segments",
                    mask.len(),
                    self.m()
                )));
            }
            if !self.memo.contains_key(mask) && queued.insert(mask) {
                fresh.push(mask.clone());
            }
        }
        if !fresh.is_empty() {
            let scores = self.v.evaluate(&fresh)?;
            for (mask, score) in fresh.into_iter().zip(scores) {
                self.memo.insert(mask.clone(), score);
                self.log.push(ProbeRecord { mask, score });
            }
        }
        Ok(masks.iter().map(|m| self.memo[m]).collect())
    }

    pub(crate) fn value(&mut self, mask: &Mask) -> Result<f64, AttributionError> {
        Ok(self.values(std::slice::from_ref(mask))?[0])
    }

    pub(crate) fn into_log(self) -> Vec<ProbeRecord> {
        self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_memoizes_and_logs_once() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let v = FnValue::new(2, |m: &Mask| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            m.count_ones() as f64
        });
        let mut probe = Probe::new(&v);
        let a = Mask::from_bits(vec![true, false]);
        let b = Mask::full(2);
        assert_eq!(probe.values(&[a.clone(), b.clone(), a.clone()]).unwrap(), [1.0, 2.0, 1.0]);
        assert_eq!(probe.value(&b).unwrap(), 2.0);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
        assert_eq!(probe.into_log().len(), 2);
    }

    #[test]
    fn estimator_names() {
        assert_eq!("llm-ranker".parse::<Estimator>().unwrap(), Estimator::LlmRanker);
        assert_eq!("shap".parse::<Estimator>().unwrap().resolve(12, 12), EstimatorKind::ShapExact);
        assert_eq!(Estimator::Shap.resolve(13, 12), EstimatorKind::ShapMc);
        assert!("bogus".parse::<Estimator>().is_err());
    }
}
