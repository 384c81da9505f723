//! Whitespace tokenizer over a fixed vocabulary with reserved special ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SEP: usize = 4;
pub const UNK: usize = 5;

/// Ids that never carry content: everything reserved except UNK.
pub fn is_special(id: usize) -> bool {
    id <= SEP
}

const SPECIAL_TOKENS: [(&str, usize); 6] = [
    ("[PAD]", PAD),
    ("[BOS]", BOS),
    ("[EOS]", EOS),
    ("[MASK]", MASK),
    ("[SEP]", SEP),
    ("[UNK]", UNK),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` (lowercased, deduplicated, in
    /// first-seen order).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        for (tok, id) in SPECIAL_TOKENS {
            debug_assert_eq!(vocab.tokens.len(), id);
            vocab.ids.insert(tok.to_string(), id);
            vocab.tokens.push(tok.to_string());
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || vocab.ids.contains_key(&w) {
                continue;
            }
            vocab.ids.insert(w.clone(), vocab.tokens.len());
            vocab.tokens.push(w);
        }
        vocab
    }

    /// Reserved tokens plus the `max_words` most frequent words of `texts`,
    /// ties broken alphabetically.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(ranked.into_iter().take(max_words).map(|(w, _)| w))
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = text
            .split_whitespace()
            .map(|w| self.ids.get(&w.to_lowercase()).copied().unwrap_or(UNK))
            .collect();
        TokenSequence(ids)
    }

    /// Space-joined token strings.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ids: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("vocabulary: {e}")))?;
        let mut tokens = vec![None; ids.len()];
        for (tok, &id) in &ids {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| Error::Data(format!("vocabulary id {id} for `{tok}` leaves a gap")))?;
            if slot.is_some() {
                return Err(Error::Data(format!("vocabulary id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("bijection checked")).collect();
        for (tok, id) in SPECIAL_TOKENS {
            if tokens.get(id).map(String::as_str) != Some(tok) {
                return Err(Error::Data(format!("vocabulary must reserve id {id} for {tok}")));
            }
        }
        Ok(Vocabulary { ids, tokens })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length without trailing padding.
    pub fn valid_length(&self) -> usize {
        self.0.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1)
    }

    /// Every id is in range and PAD appears only as trailing padding.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        let valid = self.valid_length();
        if self.0[..valid].contains(&PAD) {
            return Err(Error::Contract("PAD inside sequence content".into()));
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}
