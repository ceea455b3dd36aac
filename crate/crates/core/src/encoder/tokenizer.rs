//! Toy tokenizer: lowercase word/punctuation splitting over a fixed
//! vocabulary built from the training corpus, plus reserved tokens and the
//! task prefixes prepended to queries and documents.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tower a text is embedded for. Decides the prepended task prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Document,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Query => "search_query: ",
            Role::Document => "search_document: ",
        }
    }
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Reserved entries occupying the first vocabulary slots. The prefix words
/// and the colon are reserved so role prefixes survive vocabulary truncation.
pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<mask>", "search_query", "search_document", ":"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build a vocabulary from corpus texts: reserved tokens first, then
    /// corpus tokens by descending frequency (ties lexicographic), truncated
    /// to `vocab_size`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} must exceed the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(vocab_size - RESERVED.len()).map(|(t, _)| t));
        Ok(Vocab::from_tokens(tokens))
    }

    /// Reconstruct from a serialized token list (checkpoint header).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// True for ids that must never be masked or sampled as MLM corruption:
    /// padding, unk, mask and the role-prefix machinery.
    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Tokenize with the role prefix prepended, truncating to `max_len`.
    pub fn encode(&self, text: &str, role: Role, max_len: usize) -> Result<Vec<usize>> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        let full = format!("{}{}", role.prefix(), trimmed);
        Ok(self.ids_of(&full, max_len))
    }

    /// Tokenize without any prefix (MLM pretraining path).
    pub fn encode_raw(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        Ok(self.ids_of(trimmed, max_len))
    }

    fn ids_of(&self, text: &str, max_len: usize) -> Vec<usize> {
        split_tokens(text)
            .into_iter()
            .take(max_len)
            .map(|t| self.id_of(&t).unwrap_or(UNK_ID))
            .collect()
    }
}

/// Lowercase and split into alphanumeric/underscore runs and single
/// punctuation characters. Whitespace separates.
fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// A padded, masked batch of token id rows.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// Row-major [batch × seq].
    pub token_ids: Vec<usize>,
    /// False at padding positions. Every row has at least one true entry.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    /// None for raw (MLM) batches that carry no role prefix.
    pub role: Option<Role>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>], role: Option<Role>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("token batch needs at least one row".into()));
        }
        if rows.iter().any(|r| r.is_empty()) {
            return Err(Error::Input("token batch rows must be non-empty".into()));
        }
        let seq = rows.iter().map(Vec::len).max().unwrap();
        let batch = rows.len();
        let mut token_ids = vec![PAD_ID; batch * seq];
        let mut mask = vec![false; batch * seq];
        for (b, row) in rows.iter().enumerate() {
            for (s, &id) in row.iter().enumerate() {
                token_ids[b * seq + s] = id;
                mask[b * seq + s] = true;
            }
        }
        Ok(TokenBatch { token_ids, mask, batch, seq, role })
    }

    pub fn row_ids(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.seq..(b + 1) * self.seq]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::build(["hello world", "hello again world"], 32).unwrap()
    }

    #[test]
    fn query_prefix_tokens_are_prepended() {
        let v = toy_vocab();
        let ids = v.encode("hello", Role::Query, 16).unwrap();
        assert_eq!(ids[0], v.id_of("search_query").unwrap());
        assert_eq!(ids[1], v.id_of(":").unwrap());
        assert_eq!(ids[2], v.id_of("hello").unwrap());
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn document_prefix_differs() {
        let v = toy_vocab();
        let q = v.encode("hello", Role::Query, 16).unwrap();
        let d = v.encode("hello", Role::Document, 16).unwrap();
        assert_ne!(q[0], d[0]);
        assert_eq!(q[2..], d[2..]);
    }

    #[test]
    fn tokenization_is_deterministic() {
        let v = toy_vocab();
        let a = v.encode("Hello, WORLD again", Role::Document, 16).unwrap();
        let b = v.encode("Hello, WORLD again", Role::Document, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_caps_length_exactly() {
        let v = toy_vocab();
        let long = "hello world again ".repeat(20);
        let ids = v.encode(&long, Role::Query, 8).unwrap();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn empty_text_is_rejected() {
        let v = toy_vocab();
        assert!(matches!(v.encode("   ", Role::Query, 8), Err(Error::Input(_))));
        assert!(matches!(v.encode_raw("", 8), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = toy_vocab();
        let ids = v.encode_raw("zebra", 8).unwrap();
        assert_eq!(ids, vec![UNK_ID]);
    }

    #[test]
    fn vocab_build_is_frequency_then_lexicographic() {
        let v = Vocab::build(["b b a a c"], 32).unwrap();
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        let c = v.id_of("c").unwrap();
        // a and b tie at 2 occurrences → lexicographic; c trails.
        assert!(a < b && b < c);
    }

    #[test]
    fn batch_pads_and_masks() {
        let batch = TokenBatch::from_rows(&[vec![7, 8, 9], vec![7]], Some(Role::Query)).unwrap();
        assert_eq!(batch.seq, 3);
        assert_eq!(batch.row_ids(1), &[7, PAD_ID, PAD_ID]);
        assert_eq!(&batch.mask[3..], &[true, false, false]);
    }
}
