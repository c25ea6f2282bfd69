//! Token counting for size reporting.

use std::sync::Arc;

/// Counts tokens of a piece of text. Adapters may plug in an exact model
/// tokenizer; the engine itself only needs a deterministic count.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated runs, with every punctuation or symbol character
/// split out as a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultCounter;

impl TokenCounter for DefaultCounter {
    fn count(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_whitespace() {
                in_word = false;
            } else if c.is_alphanumeric() {
                if !in_word {
                    count += 1;
                    in_word = true;
                }
            } else {
                count += 1;
                in_word = false;
            }
        }
        count
    }
}

impl<F: Fn(&str) -> usize + Send + Sync> TokenCounter for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn default_counter() -> Arc<dyn TokenCounter> {
    Arc::new(DefaultCounter)
}

pub fn count_tokens(text: &str) -> usize {
    DefaultCounter.count(text)
}
