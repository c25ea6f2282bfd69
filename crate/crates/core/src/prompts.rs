//! Meta-prompts sent to the LLM, kept as versioned resource files.
//!
//! The resources use the same placeholder syntax as user templates, so the
//! doubled braces in them come out single once filled.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::{Mask, PromptTemplate, SegmentedTemplate};
use crate::tokens::TokenCounter;

pub const SEGMENTATION: &str = include_str!("../resources/segmentation_prompt.txt");
pub const ASK_FOR_MASKS: &str = include_str!("../resources/mask_prompt.txt");
pub const RANK: &str = include_str!("../resources/rank_prompt.txt");
pub const COMPRESS: &str = include_str!("../resources/compress_prompt.txt");

pub(crate) const SEGMENTATION_HEAD: &str = "Below is the prompt you need to split:";
pub(crate) const MASKS_HEAD: &str = "Below is a prompt that has already been segmented into text unit:";
pub(crate) const RANK_HEAD: &str = "Below are the results with different combinations of prompt components";
pub(crate) const COMPRESS_HEAD: &str = "Below is a prompt template that you need to compress:";
pub(crate) const PROMPT_START: &str = "<prompt_start_below (this is not part of prompt)>\n";
pub(crate) const PROMPT_END: &str = "\n<prompt_end_above (this is not part of prompt)>";
pub(crate) const EXPERIMENT_PREFIX: &str = "mask: ";

fn fill(resource: &str, values: &[(&str, String)]) -> String {
    let inputs: BTreeMap<String, String> =
        values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    PromptTemplate::parse(resource)
        .and_then(|t| t.fill(&inputs))
        .expect("bundled prompt resources are valid templates")
}

pub fn segmentation(current_prompt: &str, max_units: usize) -> String {
    fill(
        SEGMENTATION,
        &[
            ("current_prompt", current_prompt.to_string()),
            ("max_units", max_units.to_string()),
        ],
    )
}

#[derive(Serialize)]
struct UnitView<'a> {
    index: usize,
    template: &'a str,
}

/// Segments as a JSON list of `{index, template}` objects.
pub fn format_segments(seg: &SegmentedTemplate) -> String {
    let units: Vec<UnitView<'_>> = seg
        .segments()
        .iter()
        .map(|s| UnitView {
            index: s.index,
            template: &s.text,
        })
        .collect();
    serde_json::to_string_pretty(&units).expect("serializable")
}

pub fn ask_for_masks(seg: &SegmentedTemplate, num_mask: usize) -> String {
    fill(
        ASK_FOR_MASKS,
        &[
            ("segmented_prompt_template", format!("\n{}\n", format_segments(seg))),
            ("num_mask", num_mask.to_string()),
            ("num_features", seg.len().to_string()),
        ],
    )
}

pub fn format_experiments(experiments: &[(Mask, f64)]) -> String {
    experiments
        .iter()
        .map(|(mask, score)| format!("{EXPERIMENT_PREFIX}{mask}, correctness: {score:.4}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn rank(experiments: &[(Mask, f64)]) -> String {
    fill(RANK, &[("experiments", format_experiments(experiments))])
}

pub fn compress(template: &PromptTemplate, ratio: f64, counter: &dyn TokenCounter) -> String {
    let original = counter.count(template.raw_text());
    let target = (ratio * original as f64).round() as usize;
    let placeholders = if template.placeholders().is_empty() {
        "(none)".to_string()
    } else {
        template
            .placeholders()
            .iter()
            .map(|p| format!("{{{p}}}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    fill(
        COMPRESS,
        &[
            ("current_prompt", template.raw_text().to_string()),
            ("target_tokens", target.to_string()),
            ("ratio_percent", format!("{:.0}", ratio * 100.0)),
            ("original_tokens", original.to_string()),
            ("placeholder_list", placeholders),
        ],
    )
}

/// Re-asks after an unusable answer. The note changes the request, so the
/// retry is not answered from the cache.
pub fn with_feedback(prompt: &str, attempt: usize, reason: &str) -> String {
    format!(
        "{prompt}\n\nNote (attempt {}): your previous answer could not be used: {reason}. Please follow the instructions and output format exactly.",
        attempt + 1
    )
}

/// Text between the start and end markers of a segmentation or compression
/// prompt.
pub(crate) fn embedded_prompt(prompt: &str) -> Option<&str> {
    let start = prompt.find(PROMPT_START)? + PROMPT_START.len();
    let end = prompt[start..].find(PROMPT_END)? + start;
    Some(&prompt[start..end])
}
