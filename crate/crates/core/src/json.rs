//! Pulling a JSON object out of free-form LLM output.

use serde::de::DeserializeOwned;

/// Candidate JSON texts, most specific first: fenced ```json blocks, the
/// whole reply, then the outermost `{...}` span.
fn candidates(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```json") {
        let body = &rest[start + 7..];
        match body.find("```") {
            Some(end) => {
                out.push(body[..end].trim());
                rest = &body[end + 3..];
            }
            None => {
                out.push(body.trim());
                break;
            }
        }
    }
    out.push(text.trim());
    if let (Some(open), Some(close)) = (text.find('{'), text.rfind('}')) {
        if open < close {
            out.push(&text[open..=close]);
        }
    }
    out
}

pub(crate) fn parse_llm_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut last = String::from("no JSON object found");
    for candidate in candidates(text) {
        match serde_json::from_str::<T>(candidate) {
            Ok(v) => return Ok(v),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}
