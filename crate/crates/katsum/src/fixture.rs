//! Synthetic corpora for fast end-to-end checks.
//!
//! Two fixtures: a tiny eight-pair corpus for memorization runs, and a
//! seeded generator of fact-style documents whose summaries verbalize
//! exactly the "key" facts (founded / acquired / launched) while "noise"
//! facts (visited / toured / liked / met) and verb-free filler sentences
//! stay out of the summary. Fact sentences are phrased so the heuristic
//! triplet extractor recovers them from both sources and summaries, which
//! makes relevance labels and the selection head informative.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_dataset, Document};
use crate::error::Result;

/// Relations that always flow into the summary.
pub const KEY_RELATIONS: &[&str] = &["founded", "acquired", "launched"];
/// Relations that never do.
pub const NOISE_RELATIONS: &[&str] = &["visited", "toured", "liked", "met"];

/// Seed behind the committed `data/toy_*.jsonl` files.
pub const DATA_SEED: u64 = 40;

// Small pools keep every entity frequent enough in 48 training documents
// for the decoder to tie its embedding-space identity to a token.
const PEOPLE: &[&str] = &["alice", "bruno", "carmen", "diego", "elena", "farid"];
const COMPANIES: &[&str] = &["acme", "borealis", "cascadia", "dovetail", "everlight", "fernwood"];
const PLACES: &[&str] = &["tokyo", "oslo", "lisbon", "nairobi", "quito", "seoul"];
const PRODUCTS: &[&str] = &["solaris", "nimbus", "quasar", "vertex", "zephyr", "aurora"];
// None of these contain a verb from the bundled list, so the extractor
// skips them entirely.
const DISTRACTORS: &[&str] = &[
    "a calm morning in the harbor district .",
    "plenty of chatter around the main square .",
    "gray skies over the riverfront all week .",
    "a long queue outside the old bakery .",
    "fresh snow on the mountain roads again .",
    "quiet afternoons near the water tower .",
];

/// Eight fixed pairs for overfitting checks: every summary is a short
/// rephrasing of its source with heavy token overlap.
pub fn memorization_corpus() -> Vec<Document> {
    let pairs = [
        (
            "the silver owl watched the northern valley from the tall pine .",
            "the owl watched the valley .",
        ),
        (
            "a small boat drifted past the rocky cove before sunrise .",
            "the boat drifted past the cove .",
        ),
        (
            "the copper kettle whistled on the iron stove all evening .",
            "the kettle whistled on the stove .",
        ),
        (
            "two young foxes chased falling leaves across the orchard floor .",
            "the foxes chased the leaves .",
        ),
        (
            "an old clock ticked slowly inside the dusty library hall .",
            "the clock ticked in the hall .",
        ),
        (
            "the green kite climbed high above the windy shoreline today .",
            "the kite climbed above the shoreline .",
        ),
        (
            "heavy rain drummed on the tin roof through the night .",
            "the rain drummed on the roof .",
        ),
        (
            "a gray cat napped beside the warm brick chimney upstairs .",
            "the cat napped beside the chimney .",
        ),
    ];
    pairs
        .iter()
        .enumerate()
        .map(|(i, (source, summary))| Document {
            id: format!("mem_{}", i + 1),
            source: source.to_string(),
            summary: summary.to_string(),
        })
        .collect()
}

#[derive(Clone)]
struct Fact {
    head: &'static str,
    verb: &'static str,
    tail: &'static str,
    key: bool,
}

impl Fact {
    fn sentence(&self) -> String {
        format!("{} {} {} .", self.head, self.verb, self.tail)
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[&'static str]) -> &'static str {
    pool[rng.random_range(0..pool.len())]
}

fn pick_other(rng: &mut ChaCha8Rng, pool: &[&'static str], not: &str) -> &'static str {
    loop {
        let candidate = pick(rng, pool);
        if candidate != not {
            return candidate;
        }
    }
}

fn key_fact(rng: &mut ChaCha8Rng, verb: &'static str) -> Fact {
    let (head, tail) = match verb {
        "founded" => (pick(rng, PEOPLE), pick(rng, COMPANIES)),
        "acquired" => {
            let head = pick(rng, COMPANIES);
            (head, pick_other(rng, COMPANIES, head))
        }
        "launched" => (pick(rng, COMPANIES), pick(rng, PRODUCTS)),
        other => unreachable!("not a key relation: {other}"),
    };
    Fact {
        head,
        verb,
        tail,
        key: true,
    }
}

fn noise_fact(rng: &mut ChaCha8Rng, verb: &'static str) -> Fact {
    let (head, tail) = match verb {
        "visited" | "toured" => (pick(rng, PEOPLE), pick(rng, PLACES)),
        "liked" => (pick(rng, PEOPLE), pick(rng, PRODUCTS)),
        "met" => {
            let head = pick(rng, PEOPLE);
            (head, pick_other(rng, PEOPLE, head))
        }
        other => unreachable!("not a noise relation: {other}"),
    };
    Fact {
        head,
        verb,
        tail,
        key: false,
    }
}

/// Generates `n` documents. Each source interleaves two key facts, two
/// noise facts, and one or two filler sentences in random order; the
/// summary restates the key facts in their source order.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n);
    for i in 0..n {
        let mut key_verbs = KEY_RELATIONS.to_vec();
        key_verbs.shuffle(&mut rng);
        let mut noise_verbs = NOISE_RELATIONS.to_vec();
        noise_verbs.shuffle(&mut rng);

        enum Item {
            Fact(Fact),
            Filler(&'static str),
        }
        let mut items: Vec<Item> = Vec::new();
        for verb in &key_verbs[..2] {
            items.push(Item::Fact(key_fact(&mut rng, verb)));
        }
        for verb in &noise_verbs[..2] {
            items.push(Item::Fact(noise_fact(&mut rng, verb)));
        }
        let mut fillers = DISTRACTORS.to_vec();
        fillers.shuffle(&mut rng);
        for filler in &fillers[..1 + rng.random_range(0..2usize)] {
            items.push(Item::Filler(filler));
        }
        items.shuffle(&mut rng);

        let mut source_parts = Vec::new();
        let mut summary_parts = Vec::new();
        for item in &items {
            match item {
                Item::Fact(fact) => {
                    source_parts.push(fact.sentence());
                    if fact.key {
                        summary_parts.push(fact.sentence());
                    }
                }
                Item::Filler(text) => source_parts.push(text.to_string()),
            }
        }
        docs.push(Document {
            id: format!("syn_{i:03}"),
            source: source_parts.join(" "),
            summary: summary_parts.join(" "),
        });
    }
    docs
}

/// The 64-document corpus behind the committed data files, split 48/8/8.
pub fn synthetic_splits(seed: u64) -> (Vec<Document>, Vec<Document>, Vec<Document>) {
    let mut docs = synthetic_corpus(64, seed);
    let test = docs.split_off(56);
    let valid = docs.split_off(48);
    (docs, valid, test)
}

/// Writes `toy_train.jsonl`, `toy_valid.jsonl`, and `toy_test.jsonl` into
/// `dir`.
pub fn write_synthetic_data(dir: &Path, seed: u64) -> Result<()> {
    let (train, valid, test) = synthetic_splits(seed);
    save_dataset(&dir.join("toy_train.jsonl"), &train)?;
    save_dataset(&dir.join("toy_valid.jsonl"), &valid)?;
    save_dataset(&dir.join("toy_test.jsonl"), &test)?;
    Ok(())
}
