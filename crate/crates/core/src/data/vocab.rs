//! Subword vocabulary with greedy longest-match segmentation.
//!
//! Words are lowercased and split into the longest vocabulary pieces from
//! left to right; continuation pieces carry a `##` prefix. A word with any
//! uncoverable remainder becomes a single `[UNK]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIALS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Learns a vocabulary of at most `max_size` entries: the specials, every
/// character seen (as a word-initial piece and as a `##` piece), then whole
/// words by descending frequency.
pub fn build_vocab<'a>(
    sentences: impl IntoIterator<Item = &'a [String]>,
    max_size: usize,
) -> Result<Vocab> {
    if max_size < NUM_SPECIAL {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} cannot hold the {NUM_SPECIAL} special tokens"
        )));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut initial = BTreeSet::new();
    let mut inner = BTreeSet::new();
    for sentence in sentences {
        for word in sentence {
            let word = word.to_lowercase();
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                initial.insert(c.to_string());
                inner.extend(chars.map(|c| format!("{CONTINUATION}{c}")));
                *counts.entry(word).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Contract(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let candidates = initial
        .into_iter()
        .chain(inner)
        .chain(words.into_iter().map(|(w, _)| w));
    for t in candidates {
        if tokens.len() >= max_size {
            break;
        }
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    }
    Vocab::from_tokens(tokens)
}

impl Vocab {
    /// Vocabulary from an ordered token list; the specials must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIALS {
            return Err(Error::Format(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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

    /// Pieces of a single word.
    pub fn tokenize_word(&self, word: &str) -> Vec<usize> {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        pieces
    }

    /// Whitespace split, lowercase, then subword segmentation.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .flat_map(|w| self.tokenize_word(w))
            .collect()
    }

    /// Joins pieces back into space-separated words.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let piece = self.token(id).unwrap_or(SPECIALS[UNK]);
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        out
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}
