use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids at the head of every vocabulary.
pub mod special {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const SEP: usize = 2;
    pub const MASK: usize = 3;
    pub const COUNT: usize = 4;
    pub const NAMES: [&str; COUNT] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];
}

/// Ground-truth semantic class of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordClass {
    Special,
    Meaningful,
    Vacuous,
}

impl WordClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WordClass::Special => "special",
            WordClass::Meaningful => "meaningful",
            WordClass::Vacuous => "vacuous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "special" => Some(WordClass::Special),
            "meaningful" => Some(WordClass::Meaningful),
            "vacuous" => Some(WordClass::Vacuous),
            _ => None,
        }
    }
}

/// Word-level vocabulary with its meaningful / vacuous partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: Vec<WordClass>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then `meaningful`, then `vacuous`. The two word sets
    /// must be disjoint and free of duplicates.
    pub fn new(meaningful: &[String], vacuous: &[String]) -> Result<Self> {
        let entries = special::NAMES
            .iter()
            .map(|w| (w.to_string(), WordClass::Special))
            .chain(meaningful.iter().map(|w| (w.clone(), WordClass::Meaningful)))
            .chain(vacuous.iter().map(|w| (w.clone(), WordClass::Vacuous)));
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, WordClass)>) -> Result<Self> {
        let mut v = Vocabulary {
            words: Vec::new(),
            classes: Vec::new(),
            index: HashMap::new(),
        };
        for (w, class) in entries {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid word {w:?}")));
            }
            if v.index.insert(w.clone(), v.words.len()).is_some() {
                return Err(Error::Vocabulary(format!("word {w:?} listed twice")));
            }
            v.words.push(w);
            v.classes.push(class);
        }
        for (i, name) in special::NAMES.iter().enumerate() {
            if v.words.get(i).map(String::as_str) != Some(*name) || v.classes[i] != WordClass::Special {
                return Err(Error::Vocabulary(format!("special token {name} must have id {i}")));
            }
        }
        if v.classes[special::COUNT..].contains(&WordClass::Special) {
            return Err(Error::Vocabulary("special tokens after the reserved block".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn class(&self, id: usize) -> WordClass {
        self.classes[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.classes[id] == WordClass::Special
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, WordClass)> {
        self.words.iter().map(String::as_str).zip(self.classes.iter().copied())
    }

    /// Ids of every non-special word.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        special::COUNT..self.words.len()
    }

    pub fn vacuous_ids(&self) -> Vec<usize> {
        self.word_ids().filter(|&i| self.classes[i] == WordClass::Vacuous).collect()
    }

    /// Whitespace-separated words to ids; no special tokens are added.
    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        let ids = sentence
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .filter(|&i| !self.is_special(i))
                    .ok_or_else(|| Error::Vocabulary(format!("out-of-vocabulary word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Vocabulary(format!("token id {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// `[CLS] words.. [SEP]`, ready for the text encoder.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(sentence.len() / 3 + 2);
        ids.push(special::CLS);
        ids.extend(self.tokenize(sentence)?);
        ids.push(special::SEP);
        Ok(ids)
    }

    /// True for positions that hold a word (never class, boundary, padding or mask).
    pub fn content_mask(&self, ids: &[usize]) -> Vec<bool> {
        ids.iter().map(|&i| !self.is_special(i)).collect()
    }
}
