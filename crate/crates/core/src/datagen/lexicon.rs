// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word banks and templates, loaded from the TOML files under `data/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Direction, Phenomenon};
use crate::error::{Error, Result};

pub const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.toml");
pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.toml");

/// Minimum number of candidate fillers for any template slot.
pub const MIN_SLOT_FILLERS: usize = 5;

/// Scale bounds; `SCALE_NEUTRAL` sits in the middle.
pub const SCALE_MIN: u8 = 0;
pub const SCALE_MAX: u8 = 6;
pub const SCALE_NEUTRAL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Strong,
    Medium,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    pub word: String,
    pub polarity: Polarity,
    pub tier: Tier,
    pub scale: u8,
    #[serde(default)]
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionRule {
    TowardNegative,
    TowardPositive,
    TowardNeutral,
    /// Derived per pair from lexicon scale values of the key slot.
    Scale,
}

impl DirectionRule {
    pub fn fixed(self) -> Option<Direction> {
        match self {
            DirectionRule::TowardNegative => Some(Direction::TowardNegative),
            DirectionRule::TowardPositive => Some(Direction::TowardPositive),
            DirectionRule::TowardNeutral => Some(Direction::TowardNeutral),
            DirectionRule::Scale => None,
        }
    }
}

/// A piece of a parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePart {
    Text(String),
    Slot(String),
}

pub fn parse_template(template: &str) -> Result<Vec<TemplatePart>> {
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            parts.push(TemplatePart::Text(rest[..open].to_string()));
        }
        let close = rest[open..].find('}').ok_or_else(|| {
            Error::Config(format!("unclosed placeholder in template {template:?}"))
        })? + open;
        let name = &rest[open + 1..close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!(
                "bad placeholder {{{name}}} in template {template:?}"
            )));
        }
        parts.push(TemplatePart::Slot(name.to_string()));
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(Error::Config(format!("stray '}}' in template {template:?}")));
    }
    if !rest.is_empty() {
        parts.push(TemplatePart::Text(rest.to_string()));
    }
    Ok(parts)
}

#[derive(Debug, Clone, Deserialize)]
struct RawPhenomenon {
    code: Phenomenon,
    direction: DirectionRule,
    key_slot: String,
    templates: Vec<String>,
    #[serde(default)]
    slots: BTreeMap<String, Vec<(String, String)>>,
    #[serde(default)]
    contexts: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawTemplates {
    #[serde(default)]
    contexts: BTreeMap<String, Vec<String>>,
    phenomenon: Vec<RawPhenomenon>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawLexicon {
    intensifiers: Vec<String>,
    negations: Vec<String>,
    entries: Vec<LexEntry>,
}

/// Template bank for one phenomenon.
#[derive(Debug, Clone)]
pub struct PhenomenonBank {
    pub code: Phenomenon,
    pub direction: DirectionRule,
    pub key_slot: String,
    pub templates: Vec<Vec<TemplatePart>>,
    /// Varying slots: `[clean, corrupted]` fillers.
    pub slots: BTreeMap<String, Vec<(String, String)>>,
    /// Context slots visible to this phenomenon (global merged with local).
    pub contexts: BTreeMap<String, Vec<String>>,
}

impl PhenomenonBank {
    /// Every placeholder that occurs in any template, in first-seen order.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for t in &self.templates {
            for p in t {
                if let TemplatePart::Slot(name) = p {
                    if !seen.contains(&name.as_str()) {
                        seen.push(name.as_str());
                    }
                }
            }
        }
        seen
    }

    /// Words that can appear in any sentence produced from this bank.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        let mut add = |s: &str| {
            for w in s.split(|c: char| !c.is_alphanumeric() && c != '\'') {
                if !w.is_empty() {
                    words.insert(w.to_lowercase());
                }
            }
        };
        for t in &self.templates {
            for p in t {
                if let TemplatePart::Text(s) = p {
                    add(s);
                }
            }
        }
        for name in self.placeholders() {
            if let Some(fills) = self.slots.get(name) {
                for (a, b) in fills {
                    add(a);
                    add(b);
                }
            } else if let Some(vals) = self.contexts.get(name) {
                for v in vals {
                    add(v);
                }
            }
        }
        words
    }
}

/// Word entries plus template banks for every phenomenon.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub entries: BTreeMap<String, LexEntry>,
    pub intensifiers: Vec<String>,
    pub negations: Vec<String>,
    pub phenomena: BTreeMap<Phenomenon, PhenomenonBank>,
}

impl Lexicon {
    /// The banks shipped in `data/`.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_LEXICON, DEFAULT_TEMPLATES).expect("built-in banks are valid")
    }

    pub fn load(lexicon: &Path, templates: &Path) -> Result<Self> {
        let lex = std::fs::read_to_string(lexicon).map_err(|e| Error::io(lexicon, e))?;
        let tpl = std::fs::read_to_string(templates).map_err(|e| Error::io(templates, e))?;
        Self::from_toml(&lex, &tpl)
    }

    pub fn from_toml(lexicon_toml: &str, templates_toml: &str) -> Result<Self> {
        let raw_lex: RawLexicon = toml::from_str(lexicon_toml).map_err(|e| toml_error("lexicon", lexicon_toml, &e))?;
        let raw_tpl: RawTemplates = toml::from_str(templates_toml).map_err(|e| toml_error("templates", templates_toml, &e))?;

        let mut entries = BTreeMap::new();
        for e in raw_lex.entries {
            if e.scale > SCALE_MAX {
                return Err(Error::Config(format!(
                    "word {:?} has scale {} outside {SCALE_MIN}..={SCALE_MAX}",
                    e.word, e.scale
                )));
            }
            if entries.insert(e.word.clone(), e.clone()).is_some() {
                return Err(Error::Config(format!("duplicate lexicon word {:?}", e.word)));
            }
        }

        let mut phenomena = BTreeMap::new();
        for p in raw_tpl.phenomenon {
            let mut contexts = raw_tpl.contexts.clone();
            contexts.extend(p.contexts);
            let templates = p
                .templates
                .iter()
                .map(|t| parse_template(t))
                .collect::<Result<Vec<_>>>()?;
            let bank = PhenomenonBank {
                code: p.code,
                direction: p.direction,
                key_slot: p.key_slot,
                templates,
                slots: p.slots,
                contexts,
            };
            if phenomena.insert(p.code, bank).is_some() {
                return Err(Error::Config(format!("phenomenon {} defined twice", p.code)));
            }
        }
        Ok(Self {
            entries,
            intensifiers: raw_lex.intensifiers,
            negations: raw_lex.negations,
            phenomena,
        })
    }

    pub fn scale_of(&self, phrase: &str) -> Option<u8> {
        let word = last_word(phrase);
        self.entries.get(&word).map(|e| e.scale)
    }

    /// Check that a phenomenon's bank can generate pairs.
    pub fn check_phenomenon(&self, code: Phenomenon) -> Result<&PhenomenonBank> {
        let fail = |message: String| Error::Generation {
            phenomenon: code.to_string(),
            message,
        };
        let bank = self
            .phenomena
            .get(&code)
            .ok_or_else(|| fail("no template bank".into()))?;
        if bank.templates.is_empty() {
            return Err(fail("no templates".into()));
        }
        for template in &bank.templates {
            let mut varying = 0;
            let mut seen = BTreeSet::new();
            for part in template {
                let TemplatePart::Slot(name) = part else { continue };
                if !seen.insert(name) {
                    return Err(fail(format!("slot {{{name}}} used twice in one template")));
                }
                if bank.slots.contains_key(name) {
                    varying += 1;
                } else if !bank.contexts.contains_key(name) {
                    return Err(fail(format!("slot {{{name}}} has no filler bank")));
                }
            }
            if varying == 0 {
                return Err(fail("template without a varying slot".into()));
            }
            if !seen.contains(&bank.key_slot) {
                return Err(fail(format!("key slot {{{}}} missing from a template", bank.key_slot)));
            }
        }
        for name in bank.placeholders() {
            let n = bank
                .slots
                .get(name)
                .map(Vec::len)
                .or_else(|| bank.contexts.get(name).map(Vec::len))
                .unwrap_or(0);
            if n < MIN_SLOT_FILLERS {
                return Err(fail(format!(
                    "slot {{{name}}} has {n} fillers, need at least {MIN_SLOT_FILLERS}"
                )));
            }
        }
        for (name, fills) in &bank.slots {
            if let Some((a, _)) = fills.iter().find(|(a, b)| a == b || a.is_empty() || b.is_empty()) {
                return Err(fail(format!("slot {{{name}}} has degenerate filler {a:?}")));
            }
        }
        if bank.direction == DirectionRule::Scale {
            let fills = bank
                .slots
                .get(&bank.key_slot)
                .ok_or_else(|| fail("scale direction needs a varying key slot".into()))?;
            for (a, b) in fills {
                for w in [a, b] {
                    if self.scale_of(w).is_none() {
                        return Err(fail(format!("word {w:?} has no scale value")));
                    }
                }
            }
        }
        Ok(bank)
    }
}

pub(crate) fn last_word(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .last()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn toml_error(file: &str, text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        file: file.to_string(),
        line,
        message: e.message().to_string(),
    }
}
