use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{bail, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", "[UNK]"];

/// Punctuation split off the end of words into separate tokens.
const SPLIT_PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Sentence terminators; generation stops after emitting one.
pub const TERMINATORS: &[&str] = &[".", "?", "!"];

/// Lowercased whitespace tokenisation with trailing punctuation as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let core = lower.trim_end_matches(SPLIT_PUNCT);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        for c in lower[core.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

/// Token/id bijection with reserved ids 0..5.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every distinct token of `texts`, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved tokens are distinct");
        for text in texts {
            for tok in tokenize(text) {
                if !v.ids.contains_key(&tok) {
                    v.ids.insert(tok.clone(), v.tokens.len());
                    v.tokens.push(tok);
                }
            }
        }
        v
    }

    /// Vocabulary from its token list; the reserved tokens must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            bail!(Vocab, "vocabulary must start with the reserved tokens {RESERVED:?}");
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                bail!(Vocab, "invalid token {t:?} on line {}", i + 1);
            }
            if ids.insert(t.clone(), i).is_some() {
                bail!(Vocab, "duplicate token {t:?}");
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        match self.tokens.get(id) {
            Some(t) => Ok(t),
            None => bail!(Vocab, "unknown token id {id}"),
        }
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Token ids of `text`; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Words joined by spaces with punctuation attached to the preceding word; reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id)?;
            if Self::is_reserved(id) {
                continue;
            }
            let is_punct = t.len() == 1 && t.chars().all(|c| SPLIT_PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(t);
        }
        Ok(out)
    }

    pub fn is_terminator(&self, id: usize) -> bool {
        self.tokens.get(id).is_some_and(|t| TERMINATORS.contains(&t.as_str()))
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&i| i >= self.len()) {
            bail!(Vocab, "token id {bad} outside vocabulary of {}", self.len());
        }
        Ok(())
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
