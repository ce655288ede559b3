//! Subject-relation-object triplet extraction and triplet file io.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::corpus::{sentence_split, tokenize, Document, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// A normalized (head, relation, tail) triplet with provenance.
///
/// All three phrases are lowercase with single-space separation, and
/// `head != tail`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub doc_id: String,
    pub sent_idx: usize,
}

impl Triplet {
    /// Normalizes the three phrases and validates the result.
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
        doc_id: impl Into<String>,
        sent_idx: usize,
    ) -> Result<Self> {
        let head = normalize_phrase(&head.into());
        let relation = normalize_phrase(&relation.into());
        let tail = normalize_phrase(&tail.into());
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err(Error::InvalidArgument(
                "triplet fields must be non-empty after normalization".into(),
            ));
        }
        if head == tail {
            return Err(Error::InvalidArgument(format!(
                "triplet head and tail are identical ('{head}')"
            )));
        }
        Ok(Triplet {
            head,
            relation,
            tail,
            doc_id: doc_id.into(),
            sent_idx,
        })
    }
}

/// Lowercases, collapses whitespace runs, strips outer punctuation
/// characters, and drops leading determiners (`the`, `a`, `an`).
pub fn normalize_phrase(phrase: &str) -> String {
    let lowered = phrase.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric() && !c.is_whitespace());
    let mut words: Vec<&str> = trimmed.split_whitespace().collect();
    while let Some(first) = words.first() {
        if matches!(*first, "the" | "a" | "an") {
            words.remove(0);
        } else {
            break;
        }
    }
    words.join(" ")
}

/// Word lists that drive the heuristic extractor.
#[derive(Debug, Clone)]
pub struct Lexicon {
    verbs: HashSet<String>,
    stopwords: HashSet<String>,
    prepositions: HashSet<String>,
}

impl Lexicon {
    fn from_sets(
        verbs: HashSet<String>,
        stopwords: HashSet<String>,
        prepositions: HashSet<String>,
    ) -> Result<Self> {
        for (name, set) in [
            ("verbs", &verbs),
            ("stopwords", &stopwords),
            ("prepositions", &prepositions),
        ] {
            if set.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "lexicon {name} list is empty"
                )));
            }
            for special in SPECIAL_TOKENS {
                if set.contains(special) {
                    return Err(Error::InvalidArgument(format!(
                        "lexicon {name} list contains reserved token '{special}'"
                    )));
                }
            }
        }
        Ok(Lexicon {
            verbs,
            stopwords,
            prepositions,
        })
    }

    /// Loads the three word lists (one lowercase token per line).
    pub fn from_files(verbs: &Path, stopwords: &Path, prepositions: &Path) -> Result<Self> {
        let read = |path: &Path| -> Result<HashSet<String>> {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(parse_word_list(&text))
        };
        Lexicon::from_sets(read(verbs)?, read(stopwords)?, read(prepositions)?)
    }

    /// The word lists bundled with the crate.
    pub fn builtin() -> &'static Lexicon {
        static BUILTIN: OnceLock<Lexicon> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Lexicon::from_sets(
                parse_word_list(include_str!(concat!(
                    env!("CARGO_MANIFEST_DIR"),
                    "/data/lexicon/verbs.txt"
                ))),
                parse_word_list(include_str!(concat!(
                    env!("CARGO_MANIFEST_DIR"),
                    "/data/lexicon/stopwords.txt"
                ))),
                parse_word_list(include_str!(concat!(
                    env!("CARGO_MANIFEST_DIR"),
                    "/data/lexicon/prepositions.txt"
                ))),
            )
            .expect("bundled lexicon is valid")
        })
    }

    pub fn is_verb(&self, token: &str) -> bool {
        self.verbs.contains(token)
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    pub fn is_preposition(&self, token: &str) -> bool {
        self.prepositions.contains(token)
    }

    /// Whether a token can belong to a head or tail phrase span.
    fn is_content(&self, token: &str) -> bool {
        !self.is_stopword(token)
            && !self.is_preposition(token)
            && !self.is_verb(token)
            && token.chars().any(|c| c.is_alphanumeric())
    }
}

fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect()
}

/// Extracts triplets from a document's source text.
pub fn extract_triplets(doc: &Document, lexicon: &Lexicon) -> Vec<Triplet> {
    extract_from_text(&doc.source, &doc.id, lexicon)
}

/// Extracts triplets from arbitrary text, one attempt per sentence.
///
/// Within a sentence the relation anchors at the first verb-lexicon token
/// and absorbs any immediately following preposition tokens. The head is the
/// contiguous content-token span ending just before the verb; the tail is
/// the longest content-token span after the relation (earliest on ties).
/// Content spans are broken by stopwords, prepositions, verbs, and
/// punctuation. Sentences with no verb or an empty head or tail yield
/// nothing.
pub fn extract_from_text(text: &str, doc_id: &str, lexicon: &Lexicon) -> Vec<Triplet> {
    let mut triplets = Vec::new();
    for (sent_idx, sentence) in sentence_split(text).iter().enumerate() {
        let tokens = tokenize(sentence);
        let Some(verb_pos) = tokens.iter().position(|t| lexicon.is_verb(t)) else {
            continue;
        };
        let mut rel_end = verb_pos + 1;
        while rel_end < tokens.len() && lexicon.is_preposition(&tokens[rel_end]) {
            rel_end += 1;
        }
        let relation = tokens[verb_pos..rel_end].join(" ");

        let mut head_start = verb_pos;
        while head_start > 0 && lexicon.is_content(&tokens[head_start - 1]) {
            head_start -= 1;
        }
        let head = normalize_phrase(&tokens[head_start..verb_pos].join(" "));

        let tail = longest_content_span(&tokens[rel_end..], lexicon)
            .map(|span| normalize_phrase(&span.join(" ")))
            .unwrap_or_default();

        if head.is_empty() || tail.is_empty() || head == tail {
            continue;
        }
        triplets.push(Triplet {
            head,
            relation: normalize_phrase(&relation),
            tail,
            doc_id: doc_id.to_string(),
            sent_idx,
        });
    }
    triplets
}

/// Longest run of content tokens; the earliest run wins ties.
fn longest_content_span<'a>(tokens: &'a [String], lexicon: &Lexicon) -> Option<&'a [String]> {
    let mut best: Option<&[String]> = None;
    let mut start = None;
    for (i, token) in tokens.iter().enumerate() {
        if lexicon.is_content(token) {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            if best.is_none_or(|b| i - s > b.len()) {
                best = Some(&tokens[s..i]);
            }
        }
    }
    if let Some(s) = start {
        if best.is_none_or(|b| tokens.len() - s > b.len()) {
            best = Some(&tokens[s..]);
        }
    }
    best
}

/// Writes triplets as TSV: head, relation, tail, doc_id, sent_idx.
pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let mut out = String::new();
    for t in triplets {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            t.head, t.relation, t.tail, t.doc_id, t.sent_idx
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a triplet TSV. Lines with the wrong column count or an unparsable
/// sentence index are hard errors naming the line; lines whose fields
/// normalize to an invalid triplet (empty phrase, head equal to tail) are
/// dropped and counted in the returned warning count.
pub fn load_triplets(path: &Path) -> Result<(Vec<Triplet>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triplets = Vec::new();
    let mut warnings = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Tsv {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let sent_idx: usize = cols[4].parse().map_err(|_| Error::Tsv {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("sentence index '{}' is not an unsigned integer", cols[4]),
        })?;
        match Triplet::new(cols[0], cols[1], cols[2], cols[3], sent_idx) {
            Ok(t) => triplets.push(t),
            Err(_) => warnings += 1,
        }
    }
    Ok((triplets, warnings))
}
