// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-position targeting for a test pair.
//!
//! Tokens are classified by byte offsets: a token touching a substituted
//! span is a target token; every other token lies in the shared frame
//! around the spans. Frame tokens align one-to-one between the two
//! sentences. Span tokens align right to left, so when a span grows (for
//! instance by an inserted negation) the leading extra tokens stay unmatched.

use crate::datagen::{Span, TestPair};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Tokenizer};

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "am", "an", "and", "another", "are", "as", "at",
    "be", "been", "before", "but", "by", "can", "d", "did", "do", "does", "don", "during",
    "each", "even", "few", "for", "from", "had", "has", "have", "he", "her", "him", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "just", "ll", "m", "me", "more", "most", "my",
    "n", "no", "nor", "not", "now", "of", "on", "once", "one", "only", "or", "other", "our",
    "out", "over", "re", "s", "same", "she", "should", "so", "some", "such", "t", "than",
    "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "to",
    "too", "us", "ve", "very", "was", "we", "were", "what", "when", "which", "while", "who",
    "will", "with", "would", "you", "your",
];

/// Whether a token's surface text counts as a content word.
pub fn is_content_token(surface: &str) -> bool {
    let w = surface.trim().trim_matches('\'').to_lowercase();
    !w.is_empty()
        && w.chars().all(|c| c.is_alphabetic() || c == '\'')
        && !STOPWORDS.contains(&w.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePositions {
    pub tokens: TokenSequence,
    /// Tokens overlapping a substituted span.
    pub target: Vec<usize>,
    /// Content-word tokens outside every span, excluding position 0.
    pub control: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPositions {
    pub clean: SentencePositions,
    pub corrupted: SentencePositions,
    /// For each clean position, the corrupted position it corresponds to.
    pub alignment: Vec<Option<usize>>,
}

impl PairPositions {
    /// Clean target positions that have a corrupted counterpart.
    pub fn aligned_targets(&self) -> Vec<usize> {
        self.clean
            .target
            .iter()
            .copied()
            .filter(|&p| self.alignment[p].is_some())
            .collect()
    }

    /// Every clean position with a corrupted counterpart.
    pub fn aligned_all(&self) -> Vec<usize> {
        (0..self.alignment.len())
            .filter(|&p| self.alignment[p].is_some())
            .collect()
    }
}

enum Region {
    Frame(usize),
    Slot(usize),
}

struct Classified {
    frame: Vec<Vec<usize>>,
    slots: Vec<Vec<usize>>,
}

fn classify(tokens: &TokenSequence, spans: &[Span], pair_id: u32) -> Result<Classified> {
    let mut c = Classified {
        frame: vec![Vec::new(); spans.len() + 1],
        slots: vec![Vec::new(); spans.len()],
    };
    for (pos, &(s, e)) in tokens.offsets.iter().enumerate() {
        let touching: Vec<usize> = spans
            .iter()
            .enumerate()
            .filter(|(_, sp)| s < sp.end && sp.start < e)
            .map(|(j, _)| j)
            .collect();
        let region = match touching.as_slice() {
            [] => Region::Frame(spans.iter().filter(|sp| sp.end <= s).count()),
            [j] => Region::Slot(*j),
            _ => {
                return Err(Error::Alignment(format!(
                    "pair {pair_id}: token {pos} spans several substituted slots"
                )))
            }
        };
        match region {
            Region::Frame(k) => c.frame[k].push(pos),
            Region::Slot(j) => c.slots[j].push(pos),
        }
    }
    if let Some(j) = c.slots.iter().position(Vec::is_empty) {
        return Err(Error::Alignment(format!(
            "pair {pair_id}: substituted slot {j} not found after tokenization"
        )));
    }
    Ok(c)
}

fn sentence_positions(text: &str, tokens: TokenSequence, c: &Classified) -> SentencePositions {
    let mut target: Vec<usize> = c.slots.iter().flatten().copied().collect();
    target.sort_unstable();
    let mut control: Vec<usize> = c
        .frame
        .iter()
        .flatten()
        .copied()
        .filter(|&p| p > 0)
        .filter(|&p| {
            let (s, e) = tokens.offsets[p];
            text.get(s..e).is_some_and(is_content_token)
        })
        .collect();
    control.sort_unstable();
    SentencePositions {
        tokens,
        target,
        control,
    }
}

/// Target and control positions for both sentences plus the clean→corrupted alignment.
pub fn locate_target_positions(pair: &TestPair, tokenizer: &Tokenizer) -> Result<PairPositions> {
    pair.check()?;
    let clean_tokens = tokenizer.encode(&pair.clean);
    let corrupted_tokens = tokenizer.encode(&pair.corrupted);
    let cc = classify(&clean_tokens, &pair.clean_slots, pair.id)?;
    let kc = classify(&corrupted_tokens, &pair.corrupted_slots, pair.id)?;

    let mut alignment = vec![None; clean_tokens.len()];
    for (k, (a, b)) in cc.frame.iter().zip(&kc.frame).enumerate() {
        let ids_a: Vec<u32> = a.iter().map(|&p| clean_tokens.ids[p]).collect();
        let ids_b: Vec<u32> = b.iter().map(|&p| corrupted_tokens.ids[p]).collect();
        if ids_a != ids_b {
            return Err(Error::Alignment(format!(
                "pair {}: shared text segment {k} tokenizes differently in the two sentences",
                pair.id
            )));
        }
        for (&pa, &pb) in a.iter().zip(b) {
            alignment[pa] = Some(pb);
        }
    }
    for (a, b) in cc.slots.iter().zip(&kc.slots) {
        for (&pa, &pb) in a.iter().rev().zip(b.iter().rev()) {
            alignment[pa] = Some(pb);
        }
    }

    Ok(PairPositions {
        clean: sentence_positions(&pair.clean, clean_tokens, &cc),
        corrupted: sentence_positions(&pair.corrupted, corrupted_tokens, &kc),
        alignment,
    })
}
