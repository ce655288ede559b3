//! Dataset ingestion, tokenization, vocabulary, and id encoding.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which portion of a dataset a file holds.
///
/// `source` must be non-empty for every document. An empty `summary` is
/// tolerated only in the test split, which may be inference-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split '{other}' (expected train, valid, or test)"
            ))),
        }
    }
}

/// One source/summary pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub summary: String,
}

/// Reserved token ids. They occupy the first four vocabulary slots in this
/// exact order regardless of corpus statistics.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Surface forms of the reserved tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Loads a JSONL dataset. Each line must be an object with exactly the keys
/// `id`, `source`, and `summary`.
pub fn load_dataset(path: &Path, split: Split) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty document id".into(),
            });
        }
        if doc.source.is_empty() {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("document '{}' has an empty source", doc.id),
            });
        }
        if doc.summary.is_empty() && split != Split::Test {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!(
                    "document '{}' has an empty summary (only allowed in the test split)",
                    doc.id
                ),
            });
        }
        if let Some(prev) = seen.insert(doc.id.clone(), line_no) {
            let _ = prev;
            return Err(Error::DuplicateDocId { id: doc.id });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes documents as JSONL, one object per line, in the given order.
pub fn save_dataset(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Collapses whitespace runs to single spaces and trims the ends.
fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text into sentences. A sentence ends at `.`, `!`, or `?` when the
/// terminator is followed by whitespace or the end of the text. Joining the
/// returned sentences with single spaces reproduces the whitespace-normalized
/// input.
pub fn sentence_split(text: &str) -> Vec<String> {
    let normalized = normalize_whitespace(text);
    if normalized.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = normalized.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let at_end = i + 1 == chars.len();
            let before_space = !at_end && chars[i + 1] == ' ';
            if at_end || before_space {
                let sentence: String = chars[start..=i].iter().collect();
                sentences.push(sentence);
                // Skip the single separating space.
                i += if before_space { 2 } else { 1 };
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < chars.len() {
        sentences.push(chars[start..].iter().collect());
    }
    sentences
}

/// Lowercases and splits text into word-level tokens. Alphanumeric runs form
/// tokens; every other non-whitespace character becomes its own single-char
/// token. Never returns empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                current.push(lc);
            }
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token/id mapping with the four reserved tokens at fixed positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from a token list, validating that it starts
    /// with the four reserved tokens in order.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab has {} tokens, fewer than the {} reserved ones",
                tokens.len(),
                SPECIAL_TOKENS.len()
            )));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::InvalidArgument(format!(
                    "vocab entry {} is '{}', expected reserved token '{}'",
                    i, tokens[i], expected
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }

    /// Builds a vocabulary from a token list that already starts with the
    /// four reserved tokens.
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a token, or the `<unk>` id when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Surface form for an id. Panics on out-of-range ids.
    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Writes one token per line; line number equals token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.id_to_token {
            out.push_str(token);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a vocabulary file written by [`Vocab::save`]. The first four
    /// lines must be the reserved tokens in order.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_token_list(tokens).map_err(|e| {
            Error::InvalidArgument(format!("vocab file {}: {e}", path.display()))
        })
    }
}

/// Builds a vocabulary from every source and summary token in `docs`.
/// Tokens with frequency >= `min_freq` are kept, ordered by descending
/// frequency and then lexicographically; the four reserved tokens always
/// occupy ids 0 through 3.
pub fn build_vocab(docs: &[Document], min_freq: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::InvalidArgument(
            "min_freq must be at least 1".into(),
        ));
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for text in [&doc.source, &doc.summary] {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(id_to_token))
}

/// A token id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdSeq {
    pub ids: Vec<u32>,
}

impl IdSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        IdSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes tokens as `<bos>` + ids + `<eos>`, truncating the token list so
/// the result never exceeds `max_len` ids. Out-of-vocabulary tokens map to
/// `<unk>`. `max_len` must be at least 3.
pub fn encode(tokens: &[String], vocab: &Vocab, max_len: usize) -> IdSeq {
    assert!(max_len >= 3, "max_len must leave room for <bos> and <eos>");
    let body = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(BOS);
    ids.extend(tokens[..body].iter().map(|t| vocab.id(t)));
    ids.push(EOS);
    IdSeq::new(ids)
}

/// Maps ids back to tokens, skipping `<pad>`, `<bos>`, and `<eos>`.
pub fn decode(seq: &IdSeq, vocab: &Vocab) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| vocab.token(id).to_string())
        .collect()
}
