//! Shared domain types: dataset records, task prefixes and the vocabulary.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// One dataset record: problem statement, gold answer and gold rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub label: String,
    /// May be empty; the explain target then degenerates to `BOS EOS`.
    pub rationale: String,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        input: impl Into<String>,
        label: impl Into<String>,
        rationale: impl Into<String>,
    ) -> Result<Self> {
        let ex = Example {
            id: id.into(),
            input: input.into(),
            label: label.into(),
            rationale: rationale.into(),
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.trim().is_empty() {
            return Err(Error::invalid(format!("example {}: empty input", self.id)));
        }
        if self.label.trim().is_empty() {
            return Err(Error::invalid(format!("example {}: empty label", self.id)));
        }
        Ok(())
    }

    pub fn target(&self, task: TaskKind) -> &str {
        match task {
            TaskKind::Predict => &self.label,
            TaskKind::Explain => &self.rationale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Predict,
    Explain,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Predict, TaskKind::Explain];

    /// Input prefix, trailing space included.
    pub const fn prefix(self) -> &'static str {
        match self {
            TaskKind::Predict => "[predict] ",
            TaskKind::Explain => "[explain] ",
        }
    }

    /// The prefix as a single token.
    pub const fn prefix_token(self) -> &'static str {
        match self {
            TaskKind::Predict => "[predict]",
            TaskKind::Explain => "[explain]",
        }
    }

    pub fn prepend(self, text: &str) -> String {
        format!("{}{}", self.prefix(), text)
    }

    pub fn strip(self, text: &str) -> Option<&str> {
        text.strip_prefix(self.prefix())
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Predict => f.write_str("predict"),
            TaskKind::Explain => f.write_str("explain"),
        }
    }
}

/// Lowercase + whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Collapse whitespace, trim and lowercase; used for label matching.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list. The first four entries
    /// must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Joins `ids` with single spaces, dropping PAD/BOS/EOS. UNK is kept.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id >= UNK)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes_are_exact() {
        assert_eq!(TaskKind::Predict.prefix(), "[predict] ");
        assert_eq!(TaskKind::Explain.prefix(), "[explain] ");
        let s = TaskKind::Explain.prepend("why is the sky blue");
        assert_eq!(TaskKind::Explain.strip(&s), Some("why is the sky blue"));
        assert_eq!(TaskKind::Predict.strip(&s), None);
    }

    #[test]
    fn example_requires_input_and_label() {
        assert!(Example::new("1", "  ", "yes", "").is_err());
        assert!(Example::new("1", "x", "\t", "").is_err());
        assert!(Example::new("1", "x", "yes", "").is_ok());
    }

    #[test]
    fn vocabulary_bijection() {
        let v = Vocabulary::from_tokens(
            ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"].map(String::from).to_vec(),
        )
        .unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
            assert_eq!(v.token(i as TokenId), Some(t.as_str()));
        }
        assert_eq!(v.id_or_unk("zzz"), UNK);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Yes \t"), "yes");
        assert_eq!(normalize_text("A  b\nC"), "a b c");
    }
}
