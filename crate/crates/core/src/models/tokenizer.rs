//! Whitespace word-level tokenizer with role markers.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Role, Turn};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const SYS: &str = "<sys>";
pub const USR: &str = "<usr>";
pub const CLS: &str = "<cls>";

const SPECIALS: [&str; 6] = [PAD, UNK, EOS, SYS, USR, CLS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary = special tokens followed by the sorted word types of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        self
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn eos(&self) -> usize {
        self.id(EOS)
    }

    pub fn cls(&self) -> usize {
        self.id(CLS)
    }

    pub fn marker(&self, role: Role) -> usize {
        match role {
            Role::System => self.id(SYS),
            Role::User => self.id(USR),
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Role-marked history, most recent last, keeping at most `max_len` tokens
    /// from the right.
    pub fn encode_history(&self, history: &[Turn], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        for turn in history {
            ids.push(self.marker(turn.role));
            ids.extend(self.encode_text(&turn.text));
        }
        if ids.len() > max_len {
            ids.drain(..ids.len() - max_len);
        }
        ids
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
