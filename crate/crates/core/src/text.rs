//! Word splitting shared by the token counter and the lexical embedder.

/// Counts prompt tokens for budget accounting.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

/// Offline approximation of a subword tokenizer.
///
/// Each run of alphanumeric characters costs `ceil(chars / 4)` tokens, every
/// other non-whitespace character costs one token, whitespace is free.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPieceApprox;

impl TokenCounter for WordPieceApprox {
    fn count(&self, text: &str) -> usize {
        let mut tokens = 0;
        let mut run = 0usize;
        for c in text.chars() {
            if c.is_alphanumeric() {
                run += 1;
                continue;
            }
            tokens += run.div_ceil(4);
            run = 0;
            if !c.is_whitespace() {
                tokens += 1;
            }
        }
        tokens + run.div_ceil(4)
    }
}

/// Case-folded alphanumeric words of `text`, in order.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}
