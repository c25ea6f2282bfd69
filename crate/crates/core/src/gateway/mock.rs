//! Deterministic stand-ins for the LLM.
//!
//! A *scripted* oracle answers from a prompt→response table (plus substring
//! rules). A *synthetic* oracle impersonates the task model: it detects which
//! segments a prompt contains through per-segment signature strings,
//! evaluates a configured set function `v(mask)`, and answers so that the
//! task metric scores exactly the quantised value. It also answers the
//! meta-prompts (segmentation, mask proposal, ranking, compression) with
//! simple deterministic heuristics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, GatewayError};
use crate::domain::{Mask, PromptTemplate};
use crate::evaluation::MetricId;
use crate::prompts;
use crate::segmentation::structural_units;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockOracle {
    Scripted(ScriptedOracle),
    Synthetic(SyntheticOracle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub contains: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedOracle {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    /// Tried in order when no exact response matches.
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub seed: u64,
}

/// `v(mask) = bias + Σ weight` over terms whose segments are all included,
/// unless the mask is listed in `table` (keyed by bit string, e.g. "101").
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetFunction {
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
    #[serde(default)]
    pub table: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub segments: Vec<usize>,
    pub weight: f64,
}

impl SetFunction {
    pub fn additive(weights: &[f64]) -> Self {
        SetFunction {
            bias: 0.0,
            terms: weights
                .iter()
                .enumerate()
                .map(|(j, &weight)| Term {
                    segments: vec![j],
                    weight,
                })
                .collect(),
            table: BTreeMap::new(),
        }
    }

    pub fn value(&self, mask: &Mask) -> f64 {
        let key: String = mask.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        if let Some(&v) = self.table.get(&key) {
            return v;
        }
        self.bias
            + self
                .terms
                .iter()
                .filter(|t| t.segments.iter().all(|&j| j < mask.len() && mask.get(j)))
                .map(|t| t.weight)
                .sum::<f64>()
    }
}

fn default_resolution() -> usize {
    100
}

fn default_metric() -> MetricId {
    MetricId::TokenF1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticOracle {
    /// Segment `j` counts as present when its signature occurs in the prompt.
    pub signatures: Vec<String>,
    pub value: SetFunction,
    /// Number of reference tokens; values are quantised to `1/resolution`.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_metric")]
    pub metric: MetricId,
    /// Half-width of a deterministic per-prompt perturbation of `v`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Checked before any synthetic behaviour.
    #[serde(default)]
    pub rules: Vec<Rule>,
}

impl SyntheticOracle {
    pub fn new(signatures: Vec<String>, value: SetFunction) -> Self {
        SyntheticOracle {
            signatures,
            value,
            resolution: default_resolution(),
            metric: default_metric(),
            noise: 0.0,
            seed: 0,
            rules: Vec::new(),
        }
    }

    /// The reference answer every dataset example must carry.
    pub fn reference_text(&self) -> String {
        (0..self.resolution.max(1))
            .map(|i| format!("r{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn mask_of(&self, prompt: &str) -> Mask {
        Mask::from_bits(self.signatures.iter().map(|s| prompt.contains(s.as_str())).collect())
    }

    /// Value the oracle will realise for `prompt`, before quantisation.
    pub fn value_of(&self, prompt: &str) -> f64 {
        let mut v = self.value.value(&self.mask_of(prompt));
        if self.noise > 0.0 {
            let u = unit_hash(self.seed, prompt);
            v += self.noise * (2.0 * u - 1.0);
        }
        v.clamp(0.0, 1.0)
    }

    fn task_answer(&self, prompt: &str) -> String {
        let v = self.value_of(prompt);
        let n = self.resolution.max(1);
        let body = match self.metric {
            MetricId::ExactMatch => {
                if v >= 0.5 {
                    self.reference_text()
                } else {
                    "unknown".to_string()
                }
            }
            MetricId::TokenF1 => {
                let correct = (v * n as f64).round() as usize;
                (0..n)
                    .map(|i| if i < correct { format!("r{i}") } else { format!("x{i}") })
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        format!("<answer>{body}</answer>")
    }

    fn respond(&self, prompt: &str) -> String {
        if prompt.starts_with(prompts::SEGMENTATION_HEAD) {
            segmentation_reply(prompt)
        } else if prompt.starts_with(prompts::MASKS_HEAD) {
            mask_reply(prompt, self.seed)
        } else if prompt.starts_with(prompts::RANK_HEAD) {
            rank_reply(prompt)
        } else if prompt.starts_with(prompts::COMPRESS_HEAD) {
            compress_reply(prompt)
        } else {
            self.task_answer(prompt)
        }
    }
}

fn unit_hash(seed: u64, text: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

fn max_units_in(prompt: &str) -> usize {
    let needle = "Split the prompt into at most ";
    prompt
        .find(needle)
        .and_then(|i| {
            prompt[i + needle.len()..]
                .split_whitespace()
                .next()
                .and_then(|n| n.parse().ok())
        })
        .unwrap_or(5)
}

fn segmentation_reply(prompt: &str) -> String {
    let text = prompts::embedded_prompt(prompt).unwrap_or_default();
    let units: Vec<serde_json::Value> = structural_units(text, max_units_in(prompt))
        .into_iter()
        .map(|u| serde_json::json!({ "template": u }))
        .collect();
    serde_json::json!({ "units": units }).to_string()
}

fn number_after(prompt: &str, needle: &str) -> Option<usize> {
    let i = prompt.find(needle)? + needle.len();
    prompt[i..].split_whitespace().next()?.trim_end_matches('.').parse().ok()
}

fn mask_reply(prompt: &str, seed: u64) -> String {
    let m = number_after(prompt, "Each mask must be of the same length as ").unwrap_or(1).max(1);
    let t = number_after(prompt, "choose ").unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (unit_hash(seed, prompt) * u64::MAX as f64) as u64);
    let masks: Vec<Vec<u8>> = (0..t)
        .map(|_| loop {
            let bits: Vec<u8> = (0..m).map(|_| rng.random_bool(0.5) as u8).collect();
            if bits.contains(&1) {
                break bits;
            }
        })
        .collect();
    serde_json::json!({
        "masks": masks,
        "rationale": "random probes covering the components",
    })
    .to_string()
}

/// Ranks components by mean score with the component minus mean score
/// without it, over the listed experiments.
fn rank_reply(prompt: &str) -> String {
    let experiments: Vec<(Vec<bool>, f64)> = prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix(prompts::EXPERIMENT_PREFIX)?;
            let (mask, score) = rest.split_once(", correctness: ")?;
            let mask: Mask = serde_json::from_str(mask).ok()?;
            Some((mask.bits().to_vec(), score.trim().parse().ok()?))
        })
        .collect();
    let m = experiments.first().map_or(0, |(bits, _)| bits.len());
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let mut effect: Vec<(usize, f64)> = (0..m)
        .map(|j| {
            let with: Vec<f64> = experiments.iter().filter(|(b, _)| b[j]).map(|e| e.1).collect();
            let without: Vec<f64> = experiments.iter().filter(|(b, _)| !b[j]).map(|e| e.1).collect();
            (j, mean(&with) - mean(&without))
        })
        .collect();
    effect.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranking: Vec<usize> = effect.into_iter().map(|(j, _)| j).collect();
    serde_json::json!({
        "ranking": ranking,
        "rationale": "components present in higher scoring experiments rank first",
    })
    .to_string()
}

/// Keeps sentences holding placeholders and, in order, as many of the
/// others as fit half of the original length.
fn compress_reply(prompt: &str) -> String {
    let text = prompts::embedded_prompt(prompt).unwrap_or_default();
    let units = structural_units(text, usize::MAX);
    let budget = text.len() / 2;
    let mut used = 0;
    let kept: String = units
        .into_iter()
        .filter(|u| {
            let has_placeholder = PromptTemplate::parse(u).is_ok_and(|t| !t.placeholders().is_empty());
            if has_placeholder || used + u.len() <= budget {
                used += u.len();
                true
            } else {
                false
            }
        })
        .collect();
    serde_json::json!({ "compressed_prompt": kept }).to_string()
}

fn miss(prompt: &str) -> GatewayError {
    GatewayError::MockMiss(prompt.chars().take(60).collect())
}

fn by_rules<'a>(rules: &'a [Rule], prompt: &str) -> Option<&'a str> {
    rules
        .iter()
        .find(|r| prompt.contains(r.contains.as_str()))
        .map(|r| r.response.as_str())
}

impl MockOracle {
    pub fn scripted(responses: BTreeMap<String, String>) -> Self {
        MockOracle::Scripted(ScriptedOracle {
            responses,
            ..Default::default()
        })
    }

    pub fn synthetic(oracle: SyntheticOracle) -> Self {
        MockOracle::Synthetic(oracle)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::InvalidRequest(format!("reading mock file: {e}")))?;
        Self::from_json(&text).map_err(|e| GatewayError::InvalidRequest(format!("mock file: {e}")))
    }

    pub fn respond(&self, prompt: &str) -> Result<String, GatewayError> {
        match self {
            MockOracle::Scripted(s) => s
                .responses
                .get(prompt)
                .map(String::as_str)
                .or_else(|| by_rules(&s.rules, prompt))
                .map(str::to_string)
                .ok_or_else(|| miss(prompt)),
            MockOracle::Synthetic(s) => Ok(by_rules(&s.rules, prompt)
                .map(str::to_string)
                .unwrap_or_else(|| s.respond(prompt))),
        }
    }
}

impl Backend for MockOracle {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        self.respond(&req.prompt)
    }

    fn is_mock(&self) -> bool {
        true
    }
}
