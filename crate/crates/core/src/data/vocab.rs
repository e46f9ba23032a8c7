use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::special;
use crate::error::{Error, Result};

/// Bijective token ↔ id map with the specials at ids 0–4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `content` in the given order.
    pub fn from_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for t in content {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), tokens.len()).is_some() {
                return Err(Error::Data(format!("duplicate token {t}")));
            }
            tokens.push(t);
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokens to ids; unknown tokens map to UNK.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(special::UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(special::NAMES[special::UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[CLS] tokens… [SEP]`, content truncated to fit `max_len`.
    pub fn encode_sequence(&self, line: &str, max_len: usize) -> Vec<usize> {
        let mut ids = vec![special::CLS];
        ids.extend(self.encode(line).into_iter().take(max_len.saturating_sub(2)));
        ids.push(special::SEP);
        ids.truncate(max_len.max(1));
        ids
    }

    /// One token per line, in id order, specials included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_lines(text.lines())
    }

    /// Inverse of [`Vocab::save`]'s listing.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let lines: Vec<&str> = lines.into_iter().filter(|l| !l.is_empty()).collect();
        if lines.len() < special::COUNT || lines[..special::COUNT] != special::NAMES {
            return Err(Error::Data("vocabulary must start with the five specials".into()));
        }
        Self::from_tokens(lines[special::COUNT..].iter().copied())
    }
}

/// Whitespace tokens ranked by descending frequency, ties broken
/// lexicographically, ids assigned after the specials.
pub fn build_vocab<S: AsRef<str>>(lines: &[S]) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for t in line.as_ref().split_whitespace() {
            *counts.entry(t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !special::NAMES.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
