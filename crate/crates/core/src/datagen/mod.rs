// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded generators for the lexical and contextual test suites.
//!
//! Every pair is rendered from one template: varying slots take the clean
//! filler in the clean sentence and the corrupted filler in the corrupted
//! one, context slots take one shared value. The byte spans of the varying
//! fillers are recorded, so the two sentences differ only inside them.

mod lexicon;
mod positions;
mod probe_corpus;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lexicon::{
    parse_template, DirectionRule, LexEntry, Lexicon, PhenomenonBank, Polarity, TemplatePart,
    Tier, DEFAULT_LEXICON, DEFAULT_TEMPLATES, MIN_SLOT_FILLERS, SCALE_MAX, SCALE_MIN,
    SCALE_NEUTRAL,
};
pub use positions::{is_content_token, locate_target_positions, PairPositions, SentencePositions};
pub use probe_corpus::{
    generate_probe_corpus, LabeledSentence, ProbeCorpusBank, DEFAULT_PROBE_CORPUS,
};

use crate::error::{Error, Result};

/// Default number of pairs in each suite.
pub const LEXICAL_SUITE_SIZE: usize = 1_000;
pub const CONTEXTUAL_SUITE_SIZE: usize = 8_000;

/// Test-pair type: six lexical change types and fourteen contextual phenomena.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Phenomenon {
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
    C10,
    C11,
    C12,
    C13,
    C14,
}

impl Phenomenon {
    pub const LEXICAL: [Phenomenon; 6] = [
        Phenomenon::L1,
        Phenomenon::L2,
        Phenomenon::L3,
        Phenomenon::L4,
        Phenomenon::L5,
        Phenomenon::L6,
    ];

    pub const CONTEXTUAL: [Phenomenon; 14] = [
        Phenomenon::C1,
        Phenomenon::C2,
        Phenomenon::C3,
        Phenomenon::C4,
        Phenomenon::C5,
        Phenomenon::C6,
        Phenomenon::C7,
        Phenomenon::C8,
        Phenomenon::C9,
        Phenomenon::C10,
        Phenomenon::C11,
        Phenomenon::C12,
        Phenomenon::C13,
        Phenomenon::C14,
    ];

    pub const ALL: [Phenomenon; 20] = [
        Phenomenon::L1,
        Phenomenon::L2,
        Phenomenon::L3,
        Phenomenon::L4,
        Phenomenon::L5,
        Phenomenon::L6,
        Phenomenon::C1,
        Phenomenon::C2,
        Phenomenon::C3,
        Phenomenon::C4,
        Phenomenon::C5,
        Phenomenon::C6,
        Phenomenon::C7,
        Phenomenon::C8,
        Phenomenon::C9,
        Phenomenon::C10,
        Phenomenon::C11,
        Phenomenon::C12,
        Phenomenon::C13,
        Phenomenon::C14,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Phenomenon::L1 => "L1",
            Phenomenon::L2 => "L2",
            Phenomenon::L3 => "L3",
            Phenomenon::L4 => "L4",
            Phenomenon::L5 => "L5",
            Phenomenon::L6 => "L6",
            Phenomenon::C1 => "C1",
            Phenomenon::C2 => "C2",
            Phenomenon::C3 => "C3",
            Phenomenon::C4 => "C4",
            Phenomenon::C5 => "C5",
            Phenomenon::C6 => "C6",
            Phenomenon::C7 => "C7",
            Phenomenon::C8 => "C8",
            Phenomenon::C9 => "C9",
            Phenomenon::C10 => "C10",
            Phenomenon::C11 => "C11",
            Phenomenon::C12 => "C12",
            Phenomenon::C13 => "C13",
            Phenomenon::C14 => "C14",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phenomenon::L1 => "simple negation",
            Phenomenon::L2 => "intensified negation",
            Phenomenon::L3 => "sarcasm",
            Phenomenon::L4 => "domain context",
            Phenomenon::L5 => "intensification",
            Phenomenon::L6 => "complex double negation",
            Phenomenon::C1 => "strong positive",
            Phenomenon::C2 => "medium intensity",
            Phenomenon::C3 => "intensified swap",
            Phenomenon::C4 => "comparative context",
            Phenomenon::C5 => "simple negation",
            Phenomenon::C6 => "intensified negation",
            Phenomenon::C7 => "complex double negation",
            Phenomenon::C8 => "domain context",
            Phenomenon::C9 => "sarcasm",
            Phenomenon::C10 => "conditional vs actual",
            Phenomenon::C11 => "intensity variation",
            Phenomenon::C12 => "multiple intensifiers",
            Phenomenon::C13 => "intensity flip",
            Phenomenon::C14 => "scale variation",
        }
    }

    pub fn suite(self) -> SuiteKind {
        if Self::LEXICAL.contains(&self) {
            SuiteKind::Lexical
        } else {
            SuiteKind::Contextual
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("listed")
    }
}

impl fmt::Display for Phenomenon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Phenomenon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.code() == s)
            .ok_or_else(|| Error::Domain(format!("unknown phenomenon {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Lexical,
    Contextual,
}

impl SuiteKind {
    pub fn phenomena(self) -> &'static [Phenomenon] {
        match self {
            SuiteKind::Lexical => &Phenomenon::LEXICAL,
            SuiteKind::Contextual => &Phenomenon::CONTEXTUAL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Lexical => "lexical",
            SuiteKind::Contextual => "contextual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TowardNegative,
    TowardPositive,
    TowardNeutral,
}

/// Half-open byte range into a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn text(self, s: &str) -> &str {
        &s[self.start..self.end]
    }
}

/// One clean/corrupted sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPair {
    pub id: u32,
    pub phenomenon: Phenomenon,
    pub template_id: String,
    pub clean: String,
    pub corrupted: String,
    /// Substituted spans in the clean sentence, in template order.
    pub clean_slots: Vec<Span>,
    /// Matching spans in the corrupted sentence.
    pub corrupted_slots: Vec<Span>,
    pub expected_direction: Direction,
    pub scale_delta: Option<u8>,
    /// Sentiment word the pair is about.
    pub key_word: String,
    /// Sentence frame: template plus shared fillers other than the key word.
    pub context: String,
}

impl TestPair {
    /// Text between the substituted spans; identical for both sentences by construction.
    pub fn frame(sentence: &str, spans: &[Span]) -> Vec<String> {
        let mut out = Vec::with_capacity(spans.len() + 1);
        let mut cursor = 0;
        for s in spans {
            out.push(sentence[cursor..s.start].to_string());
            cursor = s.end;
        }
        out.push(sentence[cursor..].to_string());
        out
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Error::Integrity(format!("pair {}: {m}", self.id));
        if self.clean == self.corrupted {
            return Err(bad("clean and corrupted sentences are identical"));
        }
        if self.clean_slots.is_empty() || self.clean_slots.len() != self.corrupted_slots.len() {
            return Err(bad("slot lists are empty or differ in length"));
        }
        for (sentence, spans) in [
            (&self.clean, &self.clean_slots),
            (&self.corrupted, &self.corrupted_slots),
        ] {
            let mut cursor = 0;
            for s in spans.iter() {
                if s.start < cursor || s.end <= s.start || s.end > sentence.len() {
                    return Err(bad("slot spans must be non-empty, ordered and in range"));
                }
                if !sentence.is_char_boundary(s.start) || !sentence.is_char_boundary(s.end) {
                    return Err(bad("slot span splits a character"));
                }
                cursor = s.end;
            }
        }
        if Self::frame(&self.clean, &self.clean_slots)
            != Self::frame(&self.corrupted, &self.corrupted_slots)
        {
            return Err(bad("sentences differ outside the declared slots"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub kind: SuiteKind,
    pub seed: u64,
    pub pairs: Vec<TestPair>,
}

impl TestSuite {
    pub fn counts(&self) -> BTreeMap<Phenomenon, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pairs {
            *counts.entry(p.phenomenon).or_insert(0) += 1;
        }
        counts
    }

    /// Stratified subsample keeping `round(fraction × len)` pairs, allocated across
    /// phenomena by largest remainder. Original ids are kept.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<TestSuite> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction {fraction} outside (0, 1]"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let counts = self.counts();
        let target = ((self.pairs.len() as f64) * fraction).round() as usize;
        let mut alloc: Vec<(Phenomenon, usize, f64)> = counts
            .iter()
            .map(|(&p, &n)| {
                let exact = n as f64 * target as f64 / self.pairs.len() as f64;
                (p, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut remaining = target - alloc.iter().map(|a| a.1).sum::<usize>();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
        for i in order {
            if remaining == 0 {
                break;
            }
            alloc[i].1 += 1;
            remaining -= 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = HashSet::new();
        for (p, n, _) in alloc {
            let mut ids: Vec<u32> = self
                .pairs
                .iter()
                .filter(|x| x.phenomenon == p)
                .map(|x| x.id)
                .collect();
            ids.shuffle(&mut rng);
            keep.extend(ids.into_iter().take(n));
        }
        Ok(TestSuite {
            kind: self.kind,
            seed: self.seed,
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.id))
                .cloned()
                .collect(),
        })
    }

    /// Keep only the first `n` pairs of each phenomenon.
    pub fn truncate_per_phenomenon(&self, n: usize) -> TestSuite {
        let mut seen: BTreeMap<Phenomenon, usize> = BTreeMap::new();
        let pairs = self
            .pairs
            .iter()
            .filter(|p| {
                let c = seen.entry(p.phenomenon).or_insert(0);
                *c += 1;
                *c <= n
            })
            .cloned()
            .collect();
        TestSuite {
            kind: self.kind,
            seed: self.seed,
            pairs,
        }
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.pairs {
            let line = serde_json::to_string(p).expect("pair serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<suite>"), e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(kind: SuiteKind, seed: u64, r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(Path::new("<suite>"), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: TestPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
                file: format!("{} suite", kind.name()),
                line: i + 1,
                message: e.to_string(),
            })?;
            pair.check()?;
            pairs.push(pair);
        }
        Ok(Self { kind, seed, pairs })
    }
}

/// Split `total` into `k` near-equal shares; the first `total % k` get one extra.
pub fn balanced_counts(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

fn phenomenon_seed(seed: u64, p: Phenomenon) -> u64 {
    // Independent stream per phenomenon so changing one bank leaves the others intact.
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (p.index() as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

struct Rendered {
    clean: String,
    corrupted: String,
    clean_slots: Vec<Span>,
    corrupted_slots: Vec<Span>,
}

fn render(
    template: &[TemplatePart],
    varying: &BTreeMap<&str, &(String, String)>,
    context: &BTreeMap<&str, &str>,
) -> Rendered {
    let mut r = Rendered {
        clean: String::new(),
        corrupted: String::new(),
        clean_slots: Vec::new(),
        corrupted_slots: Vec::new(),
    };
    for part in template {
        match part {
            TemplatePart::Text(t) => {
                r.clean.push_str(t);
                r.corrupted.push_str(t);
            }
            TemplatePart::Slot(name) => {
                if let Some((a, b)) = varying.get(name.as_str()).map(|p| (&p.0, &p.1)) {
                    let (sa, sb) = (r.clean.len(), r.corrupted.len());
                    r.clean.push_str(a);
                    r.corrupted.push_str(b);
                    r.clean_slots.push(Span { start: sa, end: r.clean.len() });
                    r.corrupted_slots.push(Span { start: sb, end: r.corrupted.len() });
                } else {
                    let v = context[name.as_str()];
                    r.clean.push_str(v);
                    r.corrupted.push_str(v);
                }
            }
        }
    }
    r
}

fn generate_phenomenon(
    lexicon: &Lexicon,
    code: Phenomenon,
    seed: u64,
    count: usize,
    first_id: u32,
) -> Result<Vec<TestPair>> {
    let bank = lexicon.check_phenomenon(code)?;
    let mut rng = ChaCha8Rng::seed_from_u64(phenomenon_seed(seed, code));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(50).max(1000);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation {
                phenomenon: code.to_string(),
                message: format!(
                    "banks too small: only {} distinct pairs found, {count} requested",
                    out.len()
                ),
            });
        }
        let t_idx = rng.gen_range(0..bank.templates.len());
        let template = &bank.templates[t_idx];
        let mut varying = BTreeMap::new();
        let mut context = BTreeMap::new();
        for part in template {
            let TemplatePart::Slot(name) = part else { continue };
            if let Some(fills) = bank.slots.get(name) {
                varying.insert(name.as_str(), &fills[rng.gen_range(0..fills.len())]);
            } else {
                let vals = &bank.contexts[name];
                context.insert(name.as_str(), vals[rng.gen_range(0..vals.len())].as_str());
            }
        }
        let r = render(template, &varying, &context);
        if !seen.insert((r.clean.clone(), r.corrupted.clone())) {
            continue;
        }
        let key_phrase = varying
            .get(bank.key_slot.as_str())
            .map(|p| p.0.as_str())
            .or_else(|| context.get(bank.key_slot.as_str()).copied())
            .expect("key slot checked");
        let (direction, scale_delta) = match bank.direction.fixed() {
            Some(d) => (d, None),
            None => {
                let (a, b) = varying[bank.key_slot.as_str()];
                let (sa, sb) = (
                    lexicon.scale_of(a).expect("checked"),
                    lexicon.scale_of(b).expect("checked"),
                );
                let d = match sb.cmp(&sa) {
                    std::cmp::Ordering::Less => Direction::TowardNegative,
                    std::cmp::Ordering::Greater => Direction::TowardPositive,
                    std::cmp::Ordering::Equal => Direction::TowardNeutral,
                };
                (d, Some(sa.abs_diff(sb)))
            }
        };
        let frame: Vec<&str> = context
            .iter()
            .filter(|(k, _)| **k != bank.key_slot)
            .map(|(_, v)| *v)
            .collect();
        let template_id = format!("{code}/{t_idx:02}");
        let pair = TestPair {
            id: first_id + out.len() as u32,
            phenomenon: code,
            context: format!("{template_id}|{}", frame.join("|")),
            template_id,
            clean: r.clean,
            corrupted: r.corrupted,
            clean_slots: r.clean_slots,
            corrupted_slots: r.corrupted_slots,
            expected_direction: direction,
            scale_delta,
            key_word: lexicon::last_word(key_phrase),
        };
        pair.check()?;
        out.push(pair);
    }
    Ok(out)
}

/// Generate a suite with `count` pairs split evenly across the suite's phenomena.
pub fn generate_suite(
    lexicon: &Lexicon,
    kind: SuiteKind,
    seed: u64,
    count: usize,
) -> Result<TestSuite> {
    let phenomena = kind.phenomena();
    for &p in phenomena {
        lexicon.check_phenomenon(p)?;
    }
    let mut pairs = Vec::with_capacity(count);
    for (&p, n) in phenomena.iter().zip(balanced_counts(count, phenomena.len())) {
        let batch = generate_phenomenon(lexicon, p, seed, n, pairs.len() as u32)?;
        pairs.extend(batch);
    }
    Ok(TestSuite { kind, seed, pairs })
}

pub fn generate_lexical_suite(lexicon: &Lexicon, seed: u64, count: usize) -> Result<TestSuite> {
    generate_suite(lexicon, SuiteKind::Lexical, seed, count)
}

pub fn generate_contextual_suite(lexicon: &Lexicon, seed: u64, count: usize) -> Result<TestSuite> {
    generate_suite(lexicon, SuiteKind::Contextual, seed, count)
}
