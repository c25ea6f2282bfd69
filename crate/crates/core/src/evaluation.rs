//! Task metrics, masked-template evaluation and ranking fidelity.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionResult, ValueFunction};
use crate::domain::{render, EvalTask, Mask, SegmentedTemplate, Split, TemplateError};
use crate::gateway::{Gateway, GatewayError, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    ExactMatch,
    TokenF1,
}

impl std::str::FromStr for MetricId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact_match" | "exact-match" | "em" => Ok(MetricId::ExactMatch),
            "token_f1" | "token-f1" | "f1" => Ok(MetricId::TokenF1),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn score(metric: MetricId, reference: &str, prediction: &str) -> f64 {
    let reference = normalize(reference);
    let prediction = normalize(prediction);
    match metric {
        MetricId::ExactMatch => (reference == prediction) as u8 as f64,
        MetricId::TokenF1 => token_f1(&reference, &prediction),
    }
}

fn token_f1(reference: &str, prediction: &str) -> f64 {
    let gold: Vec<&str> = reference.split_whitespace().collect();
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    if gold.is_empty() || pred.is_empty() {
        return (gold.is_empty() && pred.is_empty()) as u8 as f64;
    }
    // multiset intersection
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for token in &gold {
        *remaining.entry(token).or_default() += 1;
    }
    let mut common = 0usize;
    for token in &pred {
        if let Some(n) = remaining.get_mut(token).filter(|n| **n > 0) {
            *n -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Tag pair wrapping the answer inside a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTags {
    pub open: String,
    pub close: String,
}

impl Default for AnswerTags {
    fn default() -> Self {
        AnswerTags {
            open: "<answer>".into(),
            close: "</answer>".into(),
        }
    }
}

impl AnswerTags {
    /// Text between the last opening tag and the following closing tag, or
    /// the whole completion when untagged.
    pub fn extract<'a>(&self, completion: &'a str) -> &'a str {
        let Some(start) = completion.rfind(&self.open) else {
            return completion;
        };
        let body = &completion[start + self.open.len()..];
        match body.find(&self.close) {
            Some(end) => &body[..end],
            None => body,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("the {0:?} split has no examples")]
    EmptySplit(Split),
}

/// Mean metric of one mask over a split; also the JSONL audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub mask: Mask,
    pub split: Split,
    pub mean_score: f64,
    pub n_examples: usize,
}

impl MaskScore {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("mask score serializes")
    }
}

pub fn evaluate_mask(
    seg: &SegmentedTemplate,
    mask: &Mask,
    task: &EvalTask,
    split: Split,
    gw: &Gateway,
) -> Result<MaskScore, EvaluationError> {
    let mut out = evaluate_masks(seg, std::slice::from_ref(mask), task, split, gw, &AnswerTags::default())?;
    Ok(out.remove(0))
}

/// Scores several masks with one bounded-parallel batch of completions.
pub fn evaluate_masks(
    seg: &SegmentedTemplate,
    masks: &[Mask],
    task: &EvalTask,
    split: Split,
    gw: &Gateway,
    tags: &AnswerTags,
) -> Result<Vec<MaskScore>, EvaluationError> {
    let examples = task.split(split);
    if examples.is_empty() {
        return Err(EvaluationError::EmptySplit(split));
    }
    let mut reqs = Vec::with_capacity(masks.len() * examples.len());
    for mask in masks {
        for ex in examples {
            reqs.push(gw.request(render(seg, mask, ex)?));
        }
    }
    let completions = gw.batch_complete(Phase::Evaluation, &reqs, gw.parallelism())?;
    Ok(masks
        .iter()
        .zip(completions.chunks(examples.len()))
        .map(|(mask, chunk)| {
            let total: f64 = examples
                .iter()
                .zip(chunk)
                .map(|(ex, c)| score(task.metric, &ex.reference, tags.extract(c)))
                .sum();
            MaskScore {
                mask: mask.clone(),
                split,
                mean_score: total / examples.len() as f64,
                n_examples: examples.len(),
            }
        })
        .collect())
}

/// Score of answering nothing: the value assigned to the empty mask, which
/// renders no prompt and therefore makes no call.
pub fn empty_prediction_score(task: &EvalTask, split: Split) -> f64 {
    let examples = task.split(split);
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().map(|ex| score(task.metric, &ex.reference, "")).sum::<f64>() / examples.len() as f64
}

/// `v(mask)` backed by the gateway: mean metric of the masked template.
pub struct TaskValue {
    seg: SegmentedTemplate,
    task: Arc<EvalTask>,
    split: Split,
    gw: Arc<Gateway>,
    tags: AnswerTags,
}

impl TaskValue {
    pub fn new(seg: SegmentedTemplate, task: Arc<EvalTask>, split: Split, gw: Arc<Gateway>) -> Self {
        TaskValue {
            seg,
            task,
            split,
            gw,
            tags: AnswerTags::default(),
        }
    }

    pub fn with_tags(mut self, tags: AnswerTags) -> Self {
        self.tags = tags;
        self
    }
}

impl ValueFunction for TaskValue {
    fn num_segments(&self) -> usize {
        self.seg.len()
    }

    fn evaluate(&self, masks: &[Mask]) -> Result<Vec<f64>, EvaluationError> {
        let nonempty: Vec<Mask> = masks.iter().filter(|m| m.count_ones() > 0).cloned().collect();
        let scores = evaluate_masks(&self.seg, &nonempty, &self.task, self.split, &self.gw, &self.tags)?;
        let empty = empty_prediction_score(&self.task, self.split);
        let mut scores = scores.into_iter();
        Ok(masks
            .iter()
            .map(|m| {
                if m.count_ones() == 0 {
                    empty
                } else {
                    scores.next().expect("one score per non-empty mask").mean_score
                }
            })
            .collect())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NdcgError {
    #[error("gold scores are all equal; the ranking is undefined")]
    DegenerateGold,
    #[error("estimated has {estimated} scores but gold has {gold}")]
    LengthMismatch { estimated: usize, gold: usize },
}

pub fn ndcg(estimated: &AttributionResult, gold: &AttributionResult) -> Result<f64, NdcgError> {
    ndcg_scores(&estimated.scores, &gold.scores)
}

/// NDCG of the ranking induced by `estimated` (descending, ties by index)
/// with relevance `gold_j − min(gold)`.
pub fn ndcg_scores(estimated: &[f64], gold: &[f64]) -> Result<f64, NdcgError> {
    if estimated.len() != gold.len() {
        return Err(NdcgError::LengthMismatch {
            estimated: estimated.len(),
            gold: gold.len(),
        });
    }
    let min = gold.iter().copied().fold(f64::INFINITY, f64::min);
    let relevance: Vec<f64> = gold.iter().map(|g| g - min).collect();
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(pos, &j)| relevance[j] / ((pos + 2) as f64).log2())
            .sum()
    };
    let ranked = rank_desc(estimated);
    let mut ideal = ranked.clone();
    ideal.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]));
    let best = dcg(&ideal);
    if best <= 0.0 {
        return Err(NdcgError::DegenerateGold);
    }
    Ok(dcg(&ranked) / best)
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Indices of the `k` highest scores (ties to the lower index).
pub fn top_k(scores: &[f64], k: usize) -> BTreeSet<usize> {
    rank_desc(scores).into_iter().take(k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{parse_template, EvalExample, Strategy};
    use crate::gateway::mock::{MockOracle, SetFunction, SyntheticOracle};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn metric_examples() {
        assert_eq!(score(MetricId::ExactMatch, "42", "42"), 1.0);
        assert_eq!(score(MetricId::ExactMatch, "42", "43"), 0.0);
        assert_eq!(score(MetricId::ExactMatch, "The Answer!", "answer"), 1.0);
        assert_eq!(score(MetricId::TokenF1, "cat", "the cat"), 1.0);
        // precision 1/1, recall 1/2
        assert!(close(score(MetricId::TokenF1, "black cat", "cat"), 2.0 / 3.0));
        assert_eq!(score(MetricId::TokenF1, "", ""), 1.0);
        assert_eq!(score(MetricId::TokenF1, "x", ""), 0.0);
        assert_eq!(score(MetricId::TokenF1, "", "x"), 0.0);
        // repeated tokens count once per occurrence
        assert!(close(score(MetricId::TokenF1, "a b b", "b b b"), 2.0 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0)));
    }

    #[test]
    fn answer_extraction() {
        let tags = AnswerTags::default();
        assert_eq!(tags.extract("reasoning <answer>42</answer> done"), "42");
        assert_eq!(tags.extract("plain"), "plain");
        assert_eq!(tags.extract("<answer>open"), "open");
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_scores(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        let reversed = ndcg_scores(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((reversed - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((reversed - 0.631).abs() < 1e-3);
        assert_eq!(ndcg_scores(&[1.0, 2.0], &[0.5, 0.5]), Err(NdcgError::DegenerateGold));
        assert!(matches!(ndcg_scores(&[1.0], &[1.0, 0.0]), Err(NdcgError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn ndcg_only_depends_on_ranking(
            est in prop::collection::vec(-5.0f64..5.0, 2..8),
            gold_seed in prop::collection::vec(0.0f64..1.0, 8),
            a in 0.1f64..10.0,
            b in -3.0f64..3.0,
        ) {
            let gold: Vec<f64> = gold_seed[..est.len()].to_vec();
            prop_assume!(gold.iter().any(|g| *g != gold[0]));
            let transformed: Vec<f64> = est.iter().map(|x| a * x.powi(3) + b).collect();
            prop_assume!(rank_desc(&est) == rank_desc(&transformed));
            let x = ndcg_scores(&est, &gold).unwrap();
            let y = ndcg_scores(&transformed, &gold).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }

    fn fixture(value: SetFunction, examples: usize) -> (SegmentedTemplate, EvalTask, Gateway) {
        let oracle = SyntheticOracle::new(vec!["[A]".into(), "[B]".into(), "[C]".into()], value);
        let reference = oracle.reference_text();
        let tpl = parse_template("[A] one. [B] two. [C] {q}").unwrap();
        let seg = SegmentedTemplate::new(tpl, ["[A] one. ", "[B] two. ", "[C] {q}"], Strategy::Structural).unwrap();
        let task = EvalTask::single(
            (0..examples).map(|i| EvalExample::new([("q", format!("x{i}"))], reference.clone())).collect(),
            MetricId::TokenF1,
        );
        (seg, task, Gateway::mock(MockOracle::synthetic(oracle)))
    }

    #[test]
    fn evaluate_mask_passthrough() {
        let mut value = SetFunction::default();
        value.table.insert("101".into(), 0.7);
        value.table.insert("111".into(), 1.0);
        let (seg, task, gw) = fixture(value, 3);
        let ms = evaluate_mask(&seg, &Mask::from_bits(vec![true, false, true]), &task, Split::Test, &gw).unwrap();
        assert!(close(ms.mean_score, 0.7));
        assert_eq!(ms.n_examples, 3);
        let full = evaluate_mask(&seg, &Mask::full(3), &task, Split::Test, &gw).unwrap();
        assert_eq!(full.mean_score, 1.0);
        let record: serde_json::Value = serde_json::from_str(&ms.to_json_line()).unwrap();
        assert_eq!(record["mask"], serde_json::json!([1, 0, 1]));
        assert_eq!(record["split"], "test");
        assert_eq!(record["n_examples"], 3);
        assert!(matches!(
            evaluate_mask(&seg, &Mask::empty(3), &task, Split::Test, &gw),
            Err(EvaluationError::Template(TemplateError::EmptyMask))
        ));
    }

    #[test]
    fn mean_over_examples() {
        // per-example scores {1, 0, 1} through a scripted oracle
        let tpl = parse_template("Q: {q}").unwrap();
        let seg = SegmentedTemplate::whole(tpl, Strategy::Structural);
        let task = EvalTask::single(
            vec![
                EvalExample::new([("q", "a")], "yes"),
                EvalExample::new([("q", "b")], "yes"),
                EvalExample::new([("q", "c")], "yes"),
            ],
            MetricId::ExactMatch,
        );
        let gw = Gateway::mock(MockOracle::scripted(
            [("Q: a", "yes"), ("Q: b", "no"), ("Q: c", "<answer>Yes.</answer>")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        ));
        let ms = evaluate_mask(&seg, &Mask::full(1), &task, Split::Test, &gw).unwrap();
        assert!(close(ms.mean_score, 2.0 / 3.0));
    }

    #[test]
    fn task_value_handles_empty_mask_without_calls() {
        let (seg, task, gw) = fixture(SetFunction::additive(&[0.5, 0.25, 0.25]), 2);
        let gw = Arc::new(gw);
        let v = TaskValue::new(seg, Arc::new(task), Split::Train, gw.clone());
        let out = v
            .evaluate(&[Mask::empty(3), Mask::from_bits(vec![true, true, false]), Mask::full(3)])
            .unwrap();
        assert_eq!(out[0], 0.0);
        assert!(close(out[1], 0.75));
        assert!(close(out[2], 1.0));
        // [1,1,0] drops the {q} segment, so both examples share one prompt
        assert_eq!(gw.ledger().total_calls, 3);
    }
}
