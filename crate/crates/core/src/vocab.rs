use std::collections::{BTreeSet, HashMap};

use crate::numbers::{tokenize, NumberWord};
use crate::scene::{ClassName, TemplatePool};

pub const UNKNOWN: &str = "<unk>";

/// Token-to-index map. Index 0 is the unknown token, 1..=9 are the spelled
/// numbers "two".."ten"; the remaining words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build(class_names: &[ClassName], templates: &TemplatePool) -> Self {
        let mut words = BTreeSet::new();
        for c in class_names {
            words.insert(c.singular.to_lowercase());
            words.insert(c.plural.to_lowercase());
        }
        for t in templates.all() {
            for tok in tokenize(t) {
                if !tok.core.is_empty() && !tok.core.contains(['{', '}']) {
                    words.insert(tok.core.to_lowercase());
                }
            }
        }
        let mut tokens = vec![UNKNOWN.to_string()];
        tokens.extend(NumberWord::ALL.iter().map(|n| n.word().to_string()));
        for w in words {
            if NumberWord::parse_word(&w).is_none() {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unknown(&self) -> usize {
        0
    }

    pub fn number_index(&self, n: NumberWord) -> usize {
        1 + n.index()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(self.unknown())
    }

    /// Token indices for a caption; pure-punctuation tokens are skipped.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .filter(|t| !t.core.is_empty())
            .map(|t| self.lookup(t.core))
            .collect()
    }
}
