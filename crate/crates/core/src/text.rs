//! Vocabulary, tokenization, and sentence-pair data ingestion.
//!
//! Tokens are lowercased maximal alphanumeric runs; every other
//! non-whitespace character is a token of its own. Casing and truncation
//! defaults (lowercase, 64 positions) are local choices; STS preprocessing
//! conventions vary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

/// Splits text into lowercase word and punctuation tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from every token occurring at least `min_count`
    /// times. Ids after the reserved four follow first occurrence.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for tok in split_tokens(sentence.as_ref()) {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(order.into_iter().filter(|t| counts[t] >= min_count.max(1)));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD, UNK, CLS, SEP];
        if tokens.len() < reserved.len() || tokens.iter().zip(reserved).any(|(t, r)| t != r) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes a sentence as `[CLS] ... [SEP]`, truncating the body so the
    /// whole sequence fits in `max_seq_len`.
    pub fn tokenize(&self, sentence: &str, max_seq_len: usize) -> Result<TokenizedSentence> {
        if max_seq_len < 3 {
            return Err(Error::Config(format!("max_seq_len must be at least 3, got {max_seq_len}")));
        }
        let body = split_tokens(sentence);
        if body.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let mut ids = Vec::with_capacity(body.len().min(max_seq_len - 2) + 2);
        ids.push(CLS_ID);
        ids.extend(body.iter().take(max_seq_len - 2).map(|t| self.id(t)));
        ids.push(SEP_ID);
        Ok(TokenizedSentence { ids })
    }

    /// Maps ids back to tokens, dropping specials and unknowns.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > SEP_ID)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// An unpadded id sequence beginning with `[CLS]` and ending with `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
}

impl TokenizedSentence {
    pub fn true_length(&self) -> usize {
        self.ids.len()
    }
}

/// Sentences padded to a common length, with a 0/1 attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<u8>>,
}

impl Batch {
    pub fn collate(sentences: &[TokenizedSentence]) -> Result<Self> {
        let width = sentences
            .iter()
            .map(TokenizedSentence::true_length)
            .max()
            .ok_or(Error::Empty("batch"))?;
        Ok(Self::collate_to(sentences, width))
    }

    /// Pads every sentence to exactly `width` positions (`width` must cover
    /// the longest sentence).
    pub fn collate_to(sentences: &[TokenizedSentence], width: usize) -> Self {
        let mut ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        for s in sentences {
            assert!(s.true_length() <= width, "sentence longer than batch width");
            let mut row = s.ids.clone();
            row.resize(width, PAD_ID);
            let mut m = vec![1u8; s.true_length()];
            m.resize(width, 0);
            ids.push(row);
            mask.push(m);
        }
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Checks that rows agree in width and that the mask is a prefix of ones
    /// covering exactly the non-pad ids, starting with `[CLS]`.
    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.mask.len() != self.ids.len() {
            return Err(Error::Padding("mask and id row counts differ".into()));
        }
        for (i, (ids, mask)) in self.ids.iter().zip(&self.mask).enumerate() {
            if ids.len() != w || mask.len() != w {
                return Err(Error::Padding(format!("row {i} has width {} but batch width is {w}", ids.len())));
            }
            let len = mask.iter().take_while(|&&m| m == 1).count();
            if len == 0 || mask[len..].iter().any(|&m| m != 0) {
                return Err(Error::Padding(format!("row {i} mask is not a prefix of ones")));
            }
            if ids[0] != CLS_ID || ids[len - 1] != SEP_ID {
                return Err(Error::Padding(format!("row {i} is not framed by [CLS] ... [SEP]")));
            }
            if ids[len..].iter().any(|&id| id != PAD_ID) {
                return Err(Error::Padding(format!("row {i} has non-pad ids under a zero mask")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityData {
    pub records: Vec<SimilarityRecord>,
    /// Rows dropped because they had no parsable score in [0, 5] or an empty sentence.
    pub skipped: usize,
}

/// Parses one line in either the 3-column (`score, a, b`) or the raw
/// STS-benchmark layout (score in column 5, sentences in 6 and 7).
pub fn parse_similarity_line(line: &str) -> Option<SimilarityRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    let (score, a, b) = match cols.len() {
        3 => (cols[0], cols[1], cols[2]),
        n if n >= 7 => (cols[4], cols[5], cols[6]),
        _ => return None,
    };
    let gold: f64 = score.trim().parse().ok()?;
    let (a, b) = (a.trim(), b.trim());
    if !(0.0..=5.0).contains(&gold) || a.is_empty() || b.is_empty() {
        return None;
    }
    Some(SimilarityRecord {
        sentence_a: a.to_string(),
        sentence_b: b.to_string(),
        gold,
    })
}

pub fn load_similarity_tsv(path: impl AsRef<Path>) -> Result<SimilarityData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match parse_similarity_line(line) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::NoRecords {
            path: path.to_path_buf(),
            skipped,
        });
    }
    Ok(SimilarityData { records, skipped })
}

/// One sentence per line; blank lines are dropped, duplicates kept.
pub fn load_raw_sentences(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Both sides of every pair, in file order.
pub fn sentences_from_records(records: &[SimilarityRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| [r.sentence_a.clone(), r.sentence_b.clone()])
        .collect()
}
