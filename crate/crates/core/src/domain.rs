//! Templates, segments, masks and datasets.
//!
//! Placeholders use single curly braces (`{name}`); a literal brace is written
//! doubled (`{{` or `}}`). All types here are immutable once built.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::evaluation::MetricId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template is empty")]
    EmptyTemplate,
    #[error("unbalanced brace at byte {offset}")]
    UnbalancedBraces { offset: usize },
    #[error("invalid placeholder name {name:?} at byte {offset}")]
    InvalidPlaceholder { offset: usize, name: String },
    #[error("missing input for placeholder {0:?}")]
    MissingInput(String),
    #[error("mask selects no segment")]
    EmptyMask,
    #[error("mask has length {found}, template has {expected} segments")]
    MaskLength { expected: usize, found: usize },
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
}

/// One lexical piece of a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    /// Literal text, escapes already collapsed.
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits `raw` into literal and placeholder pieces.
pub(crate) fn lex(raw: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let bytes = raw.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                if start < i {
                    pieces.push(Piece::Text(&raw[start..i]));
                }
                pieces.push(Piece::Text("{"));
                i += 2;
                start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                if start < i {
                    pieces.push(Piece::Text(&raw[start..i]));
                }
                pieces.push(Piece::Text("}"));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = raw[i + 1..]
                    .find(['{', '}'])
                    .map(|p| p + i + 1)
                    .filter(|&p| bytes[p] == b'}')
                    .ok_or(TemplateError::UnbalancedBraces { offset: i })?;
                let name = &raw[i + 1..close];
                if !is_valid_name(name) {
                    return Err(TemplateError::InvalidPlaceholder {
                        offset: i,
                        name: name.to_string(),
                    });
                }
                if start < i {
                    pieces.push(Piece::Text(&raw[start..i]));
                }
                pieces.push(Piece::Placeholder(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(TemplateError::UnbalancedBraces { offset: i }),
            _ => i += 1,
        }
    }
    if start < bytes.len() {
        pieces.push(Piece::Text(&raw[start..]));
    }
    Ok(pieces)
}

fn placeholder_names(pieces: &[Piece<'_>]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for piece in pieces {
        if let Piece::Placeholder(name) = piece {
            if !names.iter().any(|n| n == name) {
                names.push((*name).to_string());
            }
        }
    }
    names
}

/// Fills every placeholder of `raw` from `inputs`.
pub(crate) fn fill(raw: &str, inputs: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(raw.len());
    for piece in lex(raw)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Placeholder(name) => out.push_str(
                inputs
                    .get(name)
                    .ok_or_else(|| TemplateError::MissingInput(name.to_string()))?,
            ),
        }
    }
    Ok(out)
}

/// A prompt template together with its placeholder inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    raw_text: String,
    placeholders: Vec<String>,
}

impl PromptTemplate {
    pub fn parse(raw: &str) -> Result<Self, TemplateError> {
        if raw.is_empty() {
            return Err(TemplateError::EmptyTemplate);
        }
        let placeholders = placeholder_names(&lex(raw)?);
        Ok(PromptTemplate {
            raw_text: raw.to_string(),
            placeholders,
        })
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    /// Substitutes every placeholder.
    pub fn fill(&self, inputs: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        fill(&self.raw_text, inputs)
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            raw_text: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        PromptTemplate::parse(&raw.raw_text).map_err(serde::de::Error::custom)
    }
}

pub fn parse_template(raw: &str) -> Result<PromptTemplate, TemplateError> {
    PromptTemplate::parse(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Predefined,
    Structural,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Segment {
    pub index: usize,
    pub text: String,
    pub pinned: bool,
    pub contains_placeholders: Vec<String>,
}

/// An ordered, gap-free partition of a template into segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentedTemplate {
    segments: Vec<Segment>,
    source: PromptTemplate,
    strategy: Strategy,
}

impl SegmentedTemplate {
    /// Builds a segmentation of `source` from consecutive spans.
    ///
    /// Fails unless the spans are non-empty, concatenate to the source text
    /// byte for byte, and each span lexes on its own (no placeholder or
    /// brace escape is cut).
    pub fn new<S: Into<String>>(
        source: PromptTemplate,
        texts: impl IntoIterator<Item = S>,
        strategy: Strategy,
    ) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (index, text) in texts.into_iter().enumerate() {
            let text: String = text.into();
            if text.is_empty() {
                return Err(TemplateError::InvalidSegmentation(format!(
                    "segment {index} is empty"
                )));
            }
            if !source.raw_text[offset..].starts_with(&text) {
                return Err(TemplateError::InvalidSegmentation(format!(
                    "segment {index} does not continue the source at byte {offset}"
                )));
            }
            offset += text.len();
            let pieces = lex(&text).map_err(|e| {
                TemplateError::InvalidSegmentation(format!("segment {index} cuts a placeholder: {e}"))
            })?;
            segments.push(Segment {
                index,
                contains_placeholders: placeholder_names(&pieces),
                text,
                pinned: false,
            });
        }
        if segments.is_empty() {
            return Err(TemplateError::InvalidSegmentation("no segments".into()));
        }
        if offset != source.raw_text.len() {
            return Err(TemplateError::InvalidSegmentation(format!(
                "segments cover {offset} of {} bytes",
                source.raw_text.len()
            )));
        }
        Ok(SegmentedTemplate {
            segments,
            source,
            strategy,
        })
    }

    /// Single segment spanning the whole template.
    pub fn whole(source: PromptTemplate, strategy: Strategy) -> Self {
        let text = source.raw_text.clone();
        Self::new(source, [text], strategy).expect("a parsed template is a valid single segment")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn source(&self) -> &PromptTemplate {
        &self.source
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Number of segments, `M`.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn with_pinned(mut self, pinned: &[usize]) -> Self {
        for seg in &mut self.segments {
            seg.pinned = pinned.contains(&seg.index);
        }
        self
    }

    pub fn pinned_indices(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.pinned).map(|s| s.index).collect()
    }

    /// The sub-template made of the segments selected by `mask`, in order.
    pub fn restrict(&self, mask: &Mask) -> Result<SegmentedTemplate, TemplateError> {
        self.check_mask(mask)?;
        if mask.count_ones() == 0 {
            return Err(TemplateError::EmptyMask);
        }
        let kept: Vec<&Segment> = self.segments.iter().filter(|s| mask.get(s.index)).collect();
        let raw: String = kept.iter().map(|s| s.text.as_str()).collect();
        let source = PromptTemplate::parse(&raw)?;
        let pinned: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, s)| s.pinned)
            .map(|(i, _)| i)
            .collect();
        Ok(SegmentedTemplate::new(source, kept.iter().map(|s| s.text.clone()), self.strategy)?
            .with_pinned(&pinned))
    }

    pub(crate) fn check_mask(&self, mask: &Mask) -> Result<(), TemplateError> {
        if mask.len() != self.len() {
            return Err(TemplateError::MaskLength {
                expected: self.len(),
                found: mask.len(),
            });
        }
        Ok(())
    }
}

/// Instantiates the masked template for one example.
///
/// Placeholders living in excluded segments are dropped; a placeholder in an
/// included segment without an input is an error.
pub fn render(seg: &SegmentedTemplate, mask: &Mask, ex: &EvalExample) -> Result<String, TemplateError> {
    seg.check_mask(mask)?;
    if mask.count_ones() == 0 {
        return Err(TemplateError::EmptyMask);
    }
    let mut out = String::new();
    for segment in seg.segments.iter().filter(|s| mask.get(s.index)) {
        out.push_str(&fill(&segment.text, &ex.inputs)?);
    }
    Ok(out)
}

/// Binary inclusion vector over segments.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mask(Vec<bool>);

impl schemars::JsonSchema for Mask {
    fn schema_name() -> std::borrow::Cow<'static, str> {
        "Mask".into()
    }

    fn json_schema(_: &mut schemars::SchemaGenerator) -> schemars::Schema {
        schemars::json_schema!({
            "type": "array",
            "items": { "type": "integer", "enum": [0, 1] }
        })
    }
}

impl Mask {
    pub fn full(m: usize) -> Self {
        Mask(vec![true; m])
    }

    pub fn empty(m: usize) -> Self {
        Mask(vec![false; m])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn from_indices(m: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; m];
        for i in indices {
            bits[i] = true;
        }
        Mask(bits)
    }

    /// Bit `j` of the integer `code` selects segment `j`.
    pub fn from_code(m: usize, code: u64) -> Self {
        Mask((0..m).map(|j| code >> j & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn with(&self, i: usize) -> Self {
        let mut bits = self.0.clone();
        bits[i] = true;
        Mask(bits)
    }

    pub fn without(&self, i: usize) -> Self {
        let mut bits = self.0.clone();
        bits[i] = false;
        Mask(bits)
    }

    /// True when every segment of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(if *b { "1" } else { "0" })?;
        }
        f.write_str("]")
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.0.iter().map(|&b| b as u8))
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(deserializer)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalExample {
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub reference: String,
}

impl EvalExample {
    pub fn new<K: Into<String>, V: Into<String>>(
        inputs: impl IntoIterator<Item = (K, V)>,
        reference: impl Into<String>,
    ) -> Self {
        EvalExample {
            inputs: inputs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            reference: reference.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset has no examples")]
    Empty,
    #[error("example inputs use {0:?}, which is not a placeholder of the template")]
    UnknownInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub train: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    pub metric: MetricId,
}

/// One dataset line: `{"inputs": {...}, "reference": "...", "split": "train"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl EvalTask {
    pub fn new(train: Vec<EvalExample>, test: Vec<EvalExample>, metric: MetricId) -> Self {
        EvalTask { train, test, metric }
    }

    /// Same examples used for both splits.
    pub fn single(examples: Vec<EvalExample>, metric: MetricId) -> Self {
        EvalTask {
            train: examples.clone(),
            test: examples,
            metric,
        }
    }

    pub fn split(&self, split: Split) -> &[EvalExample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Reads one JSON object per line (`inputs`, `reference`, optional
    /// `split`). Without any `split` field every example serves both splits.
    pub fn from_jsonl(reader: impl BufRead, metric: MetricId) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?,
            );
        }
        Self::from_records(records, metric)
    }

    /// Splits records by their labels; unlabeled records serve both splits
    /// when nothing is labeled and count as test data otherwise.
    pub fn from_records(records: Vec<DatasetRecord>, metric: MetricId) -> Result<Self, DatasetError> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut unlabeled = Vec::new();
        for rec in records {
            let ex = EvalExample {
                inputs: rec.inputs,
                reference: rec.reference,
            };
            match rec.split {
                Some(Split::Train) => train.push(ex),
                Some(Split::Test) => test.push(ex),
                None => unlabeled.push(ex),
            }
        }
        if train.is_empty() && test.is_empty() {
            if unlabeled.is_empty() {
                return Err(DatasetError::Empty);
            }
            return Ok(EvalTask::single(unlabeled, metric));
        }
        test.extend(unlabeled);
        Ok(EvalTask { train, test, metric })
    }

    pub fn from_jsonl_file(path: impl AsRef<Path>, metric: MetricId) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(std::io::BufReader::new(file), metric)
    }

    /// Checks that every example only uses placeholders of `template`.
    pub fn check_against(&self, template: &PromptTemplate) -> Result<(), DatasetError> {
        for ex in self.train.iter().chain(&self.test) {
            if let Some(key) = ex.inputs.keys().find(|k| !template.placeholders().contains(k)) {
                return Err(DatasetError::UnknownInput(key.clone()));
            }
        }
        Ok(())
    }
}
