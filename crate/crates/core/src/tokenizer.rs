use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Words longer than this many characters become `[UNK]` without matching.
pub const MAX_WORD_CHARS: usize = 200;

/// Default packed sequence length.
pub const DEFAULT_MAX_LEN: usize = 128;

/// Bijective token/id table in BERT vocab-file format.
///
/// `[PAD]` must be id 0 so that zero-filled id buffers are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocab token {tok:?} on line {}", i + 1)));
            }
            if ids.insert(tok.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocab token {tok:?}")));
            }
        }
        let missing: Vec<&str> = SPECIAL_TOKENS
            .iter()
            .copied()
            .filter(|s| !ids.contains_key(*s))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "vocabulary lacks special tokens: {}",
                missing.join(", ")
            )));
        }
        if ids[PAD] != 0 {
            return Err(Error::Config(format!("{PAD} must be id 0, found {}", ids[PAD])));
        }
        Ok(Self {
            pad: ids[PAD],
            unk: ids[UNK],
            cls: ids[CLS],
            sep: ids[SEP],
            mask: ids[MASK],
            tokens,
            ids,
        })
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

/// Parses a vocab file: one token per line, id = zero-based line number.
pub fn parse_vocab(text: &str) -> Result<Vocab> {
    let tokens = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect::<Vec<_>>();
    let trimmed_len = tokens.iter().rposition(|t| !t.is_empty()).map_or(0, |i| i + 1);
    Vocab::from_tokens(tokens[..trimmed_len].to_vec())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_vocab(&text)
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercases, splits on whitespace, and isolates punctuation characters.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first split of one (already lowercased) word.
/// The whole word maps to `[UNK]` when any remainder fails to match.
pub fn wordpiece_word(word: &str, vocab: &Vocab) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        let mut end = chars.len();
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str("##");
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    pieces
}

/// Word-piece ids of `text`.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    basic_tokenize(text)
        .iter()
        .flat_map(|w| wordpiece_word(w, vocab))
        .collect()
}

/// Word-piece ids of pre-split words, with the index of the source word for
/// every piece.
pub fn tokenize_words<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut owner = Vec::new();
    for (w, word) in words.iter().enumerate() {
        for sub in basic_tokenize(word.as_ref()) {
            for id in wordpiece_word(&sub, vocab) {
                ids.push(id);
                owner.push(w);
            }
        }
    }
    (ids, owner)
}

/// Joins pieces back into text: continuation pieces attach without a space.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(UNK);
        match tok.strip_prefix("##") {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}

/// `[CLS] A [SEP] (B [SEP])` packed and padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Lengths `(a, b)` after dropping tokens from the longer side until
/// `a + b <= budget`. Ties trim segment B.
pub fn truncated_lengths(mut a: usize, mut b: usize, budget: usize) -> (usize, usize) {
    while a + b > budget {
        if a > b {
            a -= 1;
        } else {
            b -= 1;
        }
    }
    (a, b)
}

/// Packs piece-id segments into a [`TokenizedPair`] of exactly `max_len`.
pub fn encode_ids(a: &[usize], b: Option<&[usize]>, vocab: &Vocab, max_len: usize) -> Result<TokenizedPair> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(specials);
    let (la, lb) = truncated_lengths(a.len(), b.map_or(0, <[usize]>::len), budget);
    let mut ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&a[..la]);
    ids.push(vocab.sep_id());
    segment_ids.resize(ids.len(), 0);
    if let Some(b) = b {
        ids.extend_from_slice(&b[..lb]);
        ids.push(vocab.sep_id());
        segment_ids.resize(ids.len(), 1);
    }
    let real = ids.len();
    ids.resize(max_len, vocab.pad_id());
    let last_segment = *segment_ids.last().unwrap_or(&0);
    segment_ids.resize(max_len, last_segment);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    Ok(TokenizedPair {
        ids,
        segment_ids,
        attention_mask,
    })
}

pub fn encode_pair(a: &str, b: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<TokenizedPair> {
    let a = wordpiece_tokenize(a, vocab);
    let b = b.map(|b| wordpiece_tokenize(b, vocab));
    encode_ids(&a, b.as_deref(), vocab, max_len)
}
