use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace; each punctuation character becomes its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ↔ id table. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from texts, assigning ids in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::default();
        for text in texts {
            for tok in tokenize(text) {
                vocab.insert(tok);
            }
        }
        vocab
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = Self {
            tokens: vec![PAD_TOKEN.into(), UNK_TOKEN.into()],
            index: HashMap::from([(PAD_TOKEN.into(), PAD_ID), (UNK_TOKEN.into(), UNK_ID)]),
        };
        for t in tokens {
            vocab.insert(t);
        }
        vocab
    }

    fn insert(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(UNK_TOKEN, String::as_str)
    }

    /// Token ids and mask padded (or truncated) to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<u32>, Vec<bool>) {
        let mut ids: Vec<u32> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.len() > max_len {
            log::warn!("criterion truncated from {} to {max_len} tokens", ids.len());
            ids.truncate(max_len);
        }
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, false);
        (ids, mask)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = body.lines();
        if lines.next() != Some(PAD_TOKEN) || lines.next() != Some(UNK_TOKEN) {
            return Err(Error::format(
                path.display().to_string(),
                "vocabulary must start with <pad> and <unk>",
            ));
        }
        Ok(Self::from_tokens(lines.map(str::to_string)))
    }
}
