// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabulary.
//!
//! Text is split on whitespace, and each punctuation character becomes a
//! token of its own. Ids are dense from zero: the special tokens come first,
//! followed by every other word in sorted order, so two builds over the same
//! word set always assign the same ids.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOT: &str = "<eot>";

/// Schema tag written at the top of a persisted vocabulary.
pub const VOCAB_SCHEMA: &str = "factlab.vocab/1";

const PUNCT: &[char] = &['.', ',', '?', ':', ';', '!', '\''];

/// Split text into word-level tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in chunk.char_indices() {
            if PUNCT.contains(&ch) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build a vocabulary from raw texts.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                if tok != PAD && tok != EOT {
                    words.insert(tok.to_string());
                }
            }
        }
        let mut tokens = vec![PAD.to_string(), EOT.to_string()];
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn eot_id(&self) -> u32 {
        1
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a name that must map to exactly one token.
    pub fn single_token_id(&self, name: &str) -> Result<u32> {
        let parts = tokenize(name);
        if parts.len() != 1 {
            return Err(Error::World(format!(
                "name `{name}` splits into {} tokens",
                parts.len()
            )));
        }
        self.id(parts[0])
            .ok_or_else(|| Error::World(format!("name `{name}` is not in the vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Input(format!("unknown token `{t}`")))
            })
            .collect()
    }

    /// Space-joined rendering of `ids`; unknown ids render as `<unk:N>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_string(),
                None => format!("<unk:{id}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            schema: &'a str,
            tokens: &'a [String],
        }
        let body = serde_json::to_string_pretty(&Out {
            schema: VOCAB_SCHEMA,
            tokens: &self.tokens,
        })
        .expect("vocabulary serializes");
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            schema: String,
            tokens: Vec<String>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: In =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if parsed.schema != VOCAB_SCHEMA {
            return Err(Error::format(
                path,
                format!("expected schema {VOCAB_SCHEMA}, found {}", parsed.schema),
            ));
        }
        let vocab = Self::from_tokens(parsed.tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format(path, "duplicate tokens"));
        }
        Ok(vocab)
    }
}
