//! Cutting a template into segments.
//!
//! Three strategies: marker lines placed by the template owner, structural
//! cuts at paragraph and sentence boundaries, and LLM-proposed units that are
//! validated (and whitespace-repaired) before use. Whitespace at a cut point
//! always stays with the preceding segment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PromptTemplate, SegmentedTemplate, Strategy, TemplateError};
use crate::gateway::{Gateway, GatewayError, Phase};
use crate::json::parse_llm_json;
use crate::prompts;

pub const DEFAULT_MARKER: &str = "---SEGMENT---";
pub const DEFAULT_MAX_UNITS: usize = 12;
pub const DEFAULT_RETRY_LIMIT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    #[serde(default = "default_max_units")]
    pub max_units: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_marker")]
    pub marker: String,
    /// Extra attempts after an invalid LLM segmentation.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: usize,
}

fn default_max_units() -> usize {
    DEFAULT_MAX_UNITS
}
fn default_strategy() -> Strategy {
    Strategy::Structural
}
fn default_marker() -> String {
    DEFAULT_MARKER.to_string()
}
fn default_retry_limit() -> usize {
    DEFAULT_RETRY_LIMIT
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            max_units: DEFAULT_MAX_UNITS,
            strategy: Strategy::Structural,
            marker: DEFAULT_MARKER.to_string(),
            retry_limit: DEFAULT_RETRY_LIMIT,
        }
    }
}

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("max_units must be at least 1")]
    ZeroMaxUnits,
    #[error("segmentation marker is empty")]
    EmptyMarker,
    #[error("template has {found} marked blocks, more than max_units = {max}")]
    TooManyBlocks { found: usize, max: usize },
    #[error("LLM segmentation needs a gateway")]
    NoGateway,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Segments `t` with the configured strategy.
pub fn segment(
    t: &PromptTemplate,
    config: &SegmentationConfig,
    gw: Option<&Gateway>,
) -> Result<SegmentedTemplate, SegmentationError> {
    if config.max_units == 0 {
        return Err(SegmentationError::ZeroMaxUnits);
    }
    match config.strategy {
        Strategy::Predefined => {
            let seg = segment_predefined(t, &config.marker)?;
            if seg.len() > config.max_units {
                return Err(SegmentationError::TooManyBlocks {
                    found: seg.len(),
                    max: config.max_units,
                });
            }
            Ok(seg)
        }
        Strategy::Structural => segment_structural(&strip_markers(t, &config.marker)?, config.max_units),
        Strategy::Llm => {
            let gw = gw.ok_or(SegmentationError::NoGateway)?;
            segment_llm(&strip_markers(t, &config.marker)?, config.max_units, gw, config.retry_limit)
        }
    }
}

/// `t` without its marker lines, for strategies that ignore them.
pub fn strip_markers(t: &PromptTemplate, marker: &str) -> Result<PromptTemplate, SegmentationError> {
    if marker.is_empty() || !t.raw_text().lines().any(|l| l.trim() == marker) {
        return Ok(t.clone());
    }
    Ok(segment_predefined(t, marker)?.source().clone())
}

/// Appends whitespace-only pieces to their predecessor (or, for a leading
/// piece, to the next one) and drops empty pieces.
fn absorb_blank(pieces: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut pending = String::new();
    for piece in pieces.into_iter().filter(|p| !p.is_empty()) {
        if piece.trim().is_empty() {
            match out.last_mut() {
                Some(last) => last.push_str(&piece),
                None => pending.push_str(&piece),
            }
        } else {
            out.push(std::mem::take(&mut pending) + &piece);
        }
    }
    if !pending.is_empty() {
        out.push(pending);
    }
    out
}

/// Splits at lines consisting of `marker`. The marker text is removed; the
/// line breaks around it stay, and the segmentation's source becomes the
/// marker-free text.
pub fn segment_predefined(t: &PromptTemplate, marker: &str) -> Result<SegmentedTemplate, SegmentationError> {
    if marker.is_empty() {
        return Err(SegmentationError::EmptyMarker);
    }
    let raw = t.raw_text();
    let mut pieces = Vec::new();
    let mut piece_start = 0;
    let mut line_start = 0;
    for line in raw.split_inclusive('\n') {
        let content = line.trim_end_matches('\n').trim_end_matches('\r');
        if content.trim() == marker {
            pieces.push(raw[piece_start..line_start].to_string());
            piece_start = line_start + content.len();
        }
        line_start += line.len();
    }
    pieces.push(raw[piece_start..].to_string());
    let pieces = absorb_blank(pieces);
    let stripped: String = pieces.concat();
    let source = PromptTemplate::parse(&stripped)?;
    Ok(SegmentedTemplate::new(source, pieces, Strategy::Predefined)?)
}

/// Paragraphs end after a run of blank lines.
fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    let mut seen_content = false;
    let mut in_blank_run = false;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if !blank && in_blank_run {
            out.push(&text[start..pos]);
            start = pos;
            in_blank_run = false;
        }
        if blank && seen_content && line.ends_with('\n') && text[..pos].ends_with('\n') {
            in_blank_run = true;
        }
        if !blank {
            seen_content = true;
        }
        pos += line.len();
    }
    out.push(&text[start..]);
    out
}

/// Sentences end at `.`, `?` or `!` followed by whitespace; the whitespace
/// run stays with the sentence.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        if !chars.peek().is_some_and(|(_, n)| n.is_whitespace()) {
            continue;
        }
        let mut end = text.len();
        while let Some(&(i, n)) = chars.peek() {
            if n.is_whitespace() {
                chars.next();
            } else {
                end = i;
                break;
            }
        }
        if end < text.len() {
            out.push(&text[start..end]);
            start = end;
        }
    }
    out.push(&text[start..]);
    out
}

/// Merges the last two units until at most `max` remain.
fn merge_from_end(mut units: Vec<String>, max: usize) -> Vec<String> {
    while units.len() > max.max(1) {
        let last = units.pop().expect("len > 1");
        units.last_mut().expect("len >= 1").push_str(&last);
    }
    units
}

pub(crate) fn structural_units(text: &str, max_units: usize) -> Vec<String> {
    let paras: Vec<String> = paragraphs(text).into_iter().map(str::to_string).collect();
    if paras.len() >= max_units {
        return merge_from_end(paras, max_units);
    }
    let mut units: Vec<String> = Vec::new();
    let count = paras.len();
    for (i, para) in paras.iter().enumerate() {
        let free = max_units - units.len() - (count - i - 1);
        let sents = sentences(para).into_iter().map(str::to_string).collect();
        units.extend(merge_from_end(sents, free));
    }
    absorb_blank(units)
}

/// Cuts at paragraph, then sentence boundaries; at most `max_units` units.
pub fn segment_structural(t: &PromptTemplate, max_units: usize) -> Result<SegmentedTemplate, SegmentationError> {
    if max_units == 0 {
        return Err(SegmentationError::ZeroMaxUnits);
    }
    let units = structural_units(t.raw_text(), max_units);
    Ok(SegmentedTemplate::new(t.clone(), units, Strategy::Structural)?)
}

#[derive(Deserialize)]
struct UnitsReply {
    units: Vec<UnitReply>,
}

#[derive(Deserialize)]
struct UnitReply {
    template: String,
}

/// Aligns LLM units with `original`. Whitespace the LLM dropped between,
/// before or after units is re-attached; anything else that does not line
/// up is rejected.
pub fn align_units(original: &str, units: &[String], max_units: usize) -> Result<Vec<String>, String> {
    if units.is_empty() {
        return Err("no units returned".into());
    }
    if units.len() > max_units {
        return Err(format!("{} units returned, at most {max_units} allowed", units.len()));
    }
    let mut pieces: Vec<String> = Vec::new();
    let mut lead = String::new();
    let mut cursor = 0;
    for (i, unit) in units.iter().enumerate() {
        if unit.is_empty() {
            return Err(format!("unit {i} is empty"));
        }
        let rest = &original[cursor..];
        let (skipped, body) = if rest.starts_with(unit.as_str()) {
            (0, unit.len())
        } else {
            let trimmed = rest.trim_start();
            let unit = unit.trim_start();
            if !trimmed.starts_with(unit) {
                return Err(format!(
                    "unit {i} does not reproduce the original text at byte {cursor}"
                ));
            }
            (rest.len() - trimmed.len(), unit.len())
        };
        let gap = &rest[..skipped];
        match pieces.last_mut() {
            Some(prev) => prev.push_str(gap),
            None => lead.push_str(gap),
        }
        pieces.push(rest[skipped..skipped + body].to_string());
        cursor += skipped + body;
    }
    let tail = &original[cursor..];
    if !tail.trim().is_empty() {
        return Err(format!("original text from byte {cursor} is missing from the units"));
    }
    pieces.last_mut().expect("at least one unit").push_str(tail);
    pieces[0].insert_str(0, &lead);
    Ok(absorb_blank(pieces))
}

/// Asks the LLM for a segmentation and validates it; after
/// `retry_limit` rejected answers falls back to structural segmentation.
pub fn segment_llm(
    t: &PromptTemplate,
    max_units: usize,
    gw: &Gateway,
    retry_limit: usize,
) -> Result<SegmentedTemplate, SegmentationError> {
    if max_units == 0 {
        return Err(SegmentationError::ZeroMaxUnits);
    }
    let base = prompts::segmentation(t.raw_text(), max_units);
    let mut prompt = base.clone();
    for attempt in 0..=retry_limit {
        let reply = gw.complete(Phase::Segmentation, &gw.request(prompt.clone()))?;
        let outcome = parse_llm_json::<UnitsReply>(&reply)
            .map_err(|e| format!("reply is not the requested JSON ({e})"))
            .and_then(|r| {
                let units: Vec<String> = r.units.into_iter().map(|u| u.template).collect();
                align_units(t.raw_text(), &units, max_units)
            })
            .and_then(|units| {
                SegmentedTemplate::new(t.clone(), units, Strategy::Llm).map_err(|e| e.to_string())
            });
        match outcome {
            Ok(seg) => return Ok(seg),
            Err(reason) => {
                tracing::warn!(attempt, %reason, "rejected LLM segmentation");
                prompt = prompts::with_feedback(&base, attempt + 1, &reason);
            }
        }
    }
    tracing::warn!("falling back to structural segmentation");
    segment_structural(t, max_units)
}
