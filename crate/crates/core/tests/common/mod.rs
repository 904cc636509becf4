//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use curate_core::normalize::Passage;
use curate_core::types::{LangTag, QaType};
use curate_core::validate::{QaItem, Role, SupportSpan, Turn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A lowercase pseudo-word of 3 to 9 letters.
pub fn word(r: &mut ChaCha8Rng) -> String {
    let len = r.random_range(3..10);
    (0..len).map(|_| r.random_range(b'a'..=b'z') as char).collect()
}

pub fn words(r: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| word(r)).collect()
}

/// Replace each word with a fresh one with probability `rate`.
pub fn mutate(r: &mut ChaCha8Rng, ws: &[String], rate: f64) -> Vec<String> {
    ws.iter()
        .map(|w| if r.random_bool(rate) { word(r) } else { w.clone() })
        .collect()
}

/// Exact Jaccard similarity of character n-gram sets, computed on strings
/// with whitespace runs collapsed. Shares no code with the library.
pub fn exact_jaccard(a: &str, b: &str, n: usize) -> f64 {
    let sa = char_ngrams(a, n);
    let sb = char_ngrams(b, n);
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn char_ngrams(text: &str, n: usize) -> HashSet<String> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = collapsed.chars().collect();
    if chars.len() < n {
        return HashSet::from([collapsed]);
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Exact Jaccard for every pair of documents sharing at least one n-gram,
/// via an inverted index. Pairs absent from the map have similarity 0.
pub fn all_pairs_jaccard(docs: &[String], n: usize) -> HashMap<(usize, usize), f64> {
    let sets: Vec<HashSet<String>> = docs.iter().map(|d| char_ngrams(d, n)).collect();
    let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in sets.iter().enumerate() {
        for g in s {
            index.entry(g.as_str()).or_default().push(i);
        }
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for ids in index.values() {
        for (x, &i) in ids.iter().enumerate() {
            for &j in &ids[x + 1..] {
                *shared.entry((i.min(j), i.max(j))).or_default() += 1;
            }
        }
    }
    shared
        .into_iter()
        .map(|((i, j), inter)| {
            let union = sets[i].len() + sets[j].len() - inter;
            ((i, j), inter as f64 / union as f64)
        })
        .collect()
}

/// Cohen's kappa in exact integer arithmetic, unclamped.
pub fn kappa_oracle(a: &[u8], b: &[u8]) -> Option<f64> {
    let n = a.len() as i128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as i128;
    let labels: HashSet<u8> = a.iter().chain(b).copied().collect();
    let chance: i128 = labels
        .iter()
        .map(|l| {
            let ca = a.iter().filter(|x| *x == l).count() as i128;
            let cb = b.iter().filter(|x| *x == l).count() as i128;
            ca * cb
        })
        .sum();
    // kappa = (n*agree - chance) / (n*n - chance)
    let den = n * n - chance;
    (den != 0).then(|| (n * agree - chance) as f64 / den as f64)
}

pub struct ValidationFixture {
    pub passages: HashMap<String, Passage>,
    pub items: Vec<QaItem>,
}

fn slice_chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

/// Passages of pseudo-words and items whose answers range from verbatim
/// quotes to invented text, with planted rule violations and broken spans.
pub fn validation_fixture(n_items: usize, seed: u64) -> ValidationFixture {
    let mut r = rng(seed);
    let mut passages = HashMap::new();
    let mut ids = Vec::new();
    for p in 0..(n_items / 10).max(1) {
        let sentences: Vec<String> = (0..6)
            .map(|_| {
                let n = r.random_range(6..14);
                let mut s = words(&mut r, n).join(" ");
                s.push('.');
                s
            })
            .collect();
        let id = format!("doc/{p:04}");
        passages.insert(
            id.clone(),
            Passage {
                passage_id: id.clone(),
                entry_id: "doc".into(),
                page_span: (1, 1),
                text: sentences.join(" "),
                lang: LangTag::EnLatn,
                division: None,
            },
        );
        ids.push(id);
    }
    let mut items = Vec::new();
    for i in 0..n_items {
        let pid = ids.choose(&mut r).unwrap().clone();
        let text = passages[&pid].text.clone();
        let len = text.chars().count();
        let start = r.random_range(0..len / 2);
        let end = (start + r.random_range(25..80)).min(len);
        let quote = slice_chars(&text, start, end);
        let quote_words: Vec<String> = quote.split_whitespace().map(str::to_owned).collect();
        let kind = r.random_range(0..8);
        let mut answer = match kind {
            // verbatim
            0 | 1 => quote.clone(),
            // partially invented
            2 | 3 => {
                let rate = r.random_range(0.1..0.9);
                mutate(&mut r, &quote_words, rate).join(" ")
            }
            // fully invented
            4 => words(&mut r, quote_words.len().max(4)).join(" "),
            // too short
            5 => "yes".to_string(),
            // prescriptive
            6 => format!("{quote} you should take 500 mg"),
            // unbalanced brackets
            _ => format!("{quote} (see above"),
        };
        if answer.trim().is_empty() {
            answer = quote.clone();
        }
        let mut span = SupportSpan {
            start,
            end,
            text: quote.clone(),
        };
        if r.random_bool(0.05) {
            span.text = format!("{} x", span.text);
        }
        if r.random_bool(0.03) {
            span.end = len + 5;
        }
        items.push(QaItem {
            item_id: format!("{pid}#QaPair/{i:05}"),
            qa_type: QaType::QaPair,
            language: LangTag::EnLatn,
            domain: "Unassigned".into(),
            turns: vec![
                Turn {
                    role: Role::User,
                    text: "What does the passage state?".into(),
                },
                Turn {
                    role: Role::Assistant,
                    text: answer.clone(),
                },
            ],
            support_spans: vec![span],
            source: pid,
            answer_final: answer,
            options: None,
            gold_option: None,
        });
    }
    ValidationFixture { passages, items }
}

/// 500-page corpus: 450 unrelated pages plus 50 light edits of the first
/// 50. Returns the texts and the planted pairs.
pub fn planted_corpus(seed: u64) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut r = rng(seed);
    let mut base: Vec<Vec<String>> = (0..450).map(|_| words(&mut r, 220)).collect();
    let mut planted = Vec::new();
    for i in 0..50 {
        let edited = mutate(&mut r, &base[i], 0.01);
        planted.push((i, base.len()));
        base.push(edited);
    }
    (base.into_iter().map(|w| w.join(" ")).collect(), planted)
}

const PIECES: &[&str] = &[
    "क", "ख", "ग", "त", "र", "म", "स", "ह", "ा", "ि", "ी", "ु", "े", "ो", "ं", "ः", "्", "़", "ँ",
    "अ", "आ", "इ", "ॐ", "।", "॥", "०", "१", "२", "९", "क़", "ड़", "\u{200D}", "\u{200C}", "\u{00AD}",
    "a", "e", "s", "t", "I", "O", "0", "1", "5", "l", "ﬁ", "ﬂ", "é", "e\u{0301}", "ā", "ṣ", "ṛ", "-",
    "-\n", "'", "\"", "“", "”", ",", ".", "(", ")", " ", " ", "  ", "\t", "\n", "\n\n", "\u{00A0}",
    "\r\n", "\u{FEFF}", "Page 3", "है", "का", "के", "च", "इति",
];

/// Random mixed Devanagari/Latin OCR-like text: stray marks, ligatures,
/// decomposed accents, invisible joiners, hyphenated line breaks.
pub fn mixed_text(r: &mut ChaCha8Rng, max_pieces: usize) -> String {
    let n = r.random_range(0..=max_pieces);
    (0..n).map(|_| *PIECES.choose(r).unwrap()).collect()
}
