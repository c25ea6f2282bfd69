use serde::{Deserialize, Serialize};

use super::{AttributionError, AttributionResult, EstimatorKind, Probe, ValueFunction};
use crate::domain::{Mask, SegmentedTemplate};
use crate::gateway::{Gateway, Phase};
use crate::json::parse_llm_json;
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RankerState {
    pub t: usize,
    pub k: usize,
    pub candidate_masks: Vec<Mask>,
    pub candidate_scores: Vec<f64>,
    /// Segment indices, most important first.
    pub ranking: Vec<usize>,
    pub rationale: String,
    #[serde(default)]
    pub mask_rationale: String,
}

#[derive(Deserialize)]
struct MasksReply {
    masks: Vec<Vec<serde_json::Value>>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct RankingReply {
    ranking: Vec<serde_json::Value>,
    #[serde(default)]
    rationale: String,
}

/// `a_j = 1 / π(j)` with `π(j)` the 1-based position of `j` in `ranking`.
pub fn ranking_scores(ranking: &[usize]) -> Vec<f64> {
    let mut scores = vec![0.0; ranking.len()];
    for (pos, &j) in ranking.iter().enumerate() {
        scores[j] = 1.0 / (pos + 1) as f64;
    }
    scores
}

fn bit(value: &serde_json::Value) -> Option<bool> {
    match value {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::Number(n) => match n.as_f64()? {
            0.0 => Some(false),
            1.0 => Some(true),
            _ => None,
        },
        _ => None,
    }
}

fn parse_masks(reply: &str, t: usize, m: usize) -> Result<(Vec<Mask>, String), String> {
    let parsed: MasksReply = parse_llm_json(reply).map_err(|e| format!("reply is not the requested JSON ({e})"))?;
    if parsed.masks.len() != t {
        return Err(format!("expected {t} masks, got {}", parsed.masks.len()));
    }
    let masks = parsed
        .masks
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            if raw.len() != m {
                return Err(format!("mask {i} has length {}, expected {m}", raw.len()));
            }
            raw.iter()
                .map(bit)
                .collect::<Option<Vec<bool>>>()
                .map(Mask::from_bits)
                .ok_or_else(|| format!("mask {i} contains values other than 0 and 1"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((masks, parsed.rationale))
}

fn parse_ranking(reply: &str, m: usize) -> Result<(Vec<usize>, String), String> {
    let parsed: RankingReply = parse_llm_json(reply).map_err(|e| format!("reply is not the requested JSON ({e})"))?;
    let ranking: Vec<usize> = parsed
        .ranking
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<_>>()
        .ok_or("ranking contains values that are not non-negative integers")?;
    let mut seen = vec![false; m];
    for &j in &ranking {
        if j >= m || std::mem::replace(&mut seen[j], true) {
            return Err(format!("ranking {ranking:?} is not a permutation of 0..{m}"));
        }
    }
    if ranking.len() != m {
        return Err(format!("ranking {ranking:?} is not a permutation of 0..{m}"));
    }
    Ok((ranking, parsed.rationale))
}

/// One meta-call, re-asked with feedback until `parse` accepts the reply.
fn ask<T>(
    gw: &Gateway,
    base: &str,
    retry_limit: usize,
    calls: &mut usize,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Result<T, String>, AttributionError> {
    let mut prompt = base.to_string();
    let mut last = String::new();
    for attempt in 0..=retry_limit {
        let reply = gw.complete(Phase::Attribution, &gw.request(prompt.clone()))?;
        *calls += 1;
        match parse(&reply) {
            Ok(value) => return Ok(Ok(value)),
            Err(reason) => {
                tracing::warn!(attempt, %reason, "rejected meta-call reply");
                prompt = prompts::with_feedback(base, attempt + 1, &reason);
                last = reason;
            }
        }
    }
    Ok(Err(last))
}

/// LLM-driven attribution: the LLM proposes `t` masks, each is scored with
/// `v`, and the LLM ranks the segments from those experiments. `k` is kept
/// on the state for the caller's pruning step.
pub fn llm_ranker(
    seg: &SegmentedTemplate,
    v: &dyn ValueFunction,
    gw: &Gateway,
    t: usize,
    k: usize,
    retry_limit: usize,
) -> Result<AttributionResult, AttributionError> {
    let m = seg.len();
    if v.num_segments() != m {
        return Err(AttributionError::DimensionMismatch(format!(
            "value function over {} segments for a {m}-segment template",
            v.num_segments()
        )));
    }
    if t == 0 {
        return Err(AttributionError::InvalidArgument("t must be at least 1".into()));
    }
    if k == 0 || k > m {
        return Err(AttributionError::InvalidArgument(format!("k = {k} must lie in 1..={m}")));
    }
    let mut meta_calls = 0;
    let (masks, mask_rationale) = ask(gw, &prompts::ask_for_masks(seg, t), retry_limit, &mut meta_calls, |r| {
        parse_masks(r, t, m)
    })?
    .map_err(AttributionError::InvalidMaskShape)?;

    let mut probe = Probe::new(v);
    let scores = probe.values(&masks)?;
    let experiments: Vec<(Mask, f64)> = masks.iter().cloned().zip(scores.iter().copied()).collect();

    let (ranking, rationale) = ask(gw, &prompts::rank(&experiments), retry_limit, &mut meta_calls, |r| {
        parse_ranking(r, m)
    })?
    .map_err(AttributionError::InvalidRanking)?;

    let mut result = AttributionResult::new(ranking_scores(&ranking), EstimatorKind::LlmRanker, 0, probe);
    result.meta_calls = meta_calls;
    result.ranker = Some(RankerState {
        t,
        k,
        candidate_masks: masks,
        candidate_scores: scores,
        ranking,
        rationale,
        mask_rationale,
    });
    Ok(result)
}
