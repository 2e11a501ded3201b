// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled sentences for training the sentiment probe.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{parse_template, TemplatePart};
use crate::error::{Error, Result};

pub const DEFAULT_PROBE_CORPUS: &str = include_str!("../../data/probe_corpus.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct ProbeCorpusBank {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub subjects: Vec<String>,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub positive: bool,
}

impl ProbeCorpusBank {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_PROBE_CORPUS).expect("built-in probe corpus is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            file: "probe corpus".into(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn adjectives(&self) -> BTreeSet<String> {
        self.positive
            .iter()
            .chain(&self.negative)
            .map(|w| w.to_lowercase())
            .collect()
    }

    fn sentences(&self, adjectives: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for t in &self.templates {
            let parts = parse_template(t)?;
            for subject in &self.subjects {
                for adj in adjectives {
                    let mut s = String::new();
                    for p in &parts {
                        match p {
                            TemplatePart::Text(x) => s.push_str(x),
                            TemplatePart::Slot(n) if n == "subject" => s.push_str(subject),
                            TemplatePart::Slot(n) if n == "adj" => s.push_str(adj),
                            TemplatePart::Slot(n) => {
                                return Err(Error::Config(format!(
                                    "probe template {t:?} uses unknown slot {{{n}}}"
                                )))
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        Ok(out)
    }
}

/// Balanced, shuffled corpus of `count` distinct sentences (half positive).
pub fn generate_probe_corpus(
    bank: &ProbeCorpusBank,
    seed: u64,
    count: usize,
) -> Result<Vec<LabeledSentence>> {
    let n_pos = count.div_ceil(2);
    let n_neg = count / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(count);
    for (words, n, positive) in [(&bank.positive, n_pos, true), (&bank.negative, n_neg, false)] {
        let mut pool = bank.sentences(words)?;
        let unique: HashSet<&String> = pool.iter().collect();
        if unique.len() != pool.len() || pool.len() < n {
            return Err(Error::Config(format!(
                "probe corpus bank yields {} distinct sentences per class, {n} needed",
                unique.len()
            )));
        }
        pool.shuffle(&mut rng);
        corpus.extend(pool.into_iter().take(n).map(|text| LabeledSentence { text, positive }));
    }
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_balanced_and_seeded() {
        let bank = ProbeCorpusBank::builtin();
        let c = generate_probe_corpus(&bank, 5, 2000).unwrap();
        assert_eq!(c.len(), 2000);
        assert_eq!(c.iter().filter(|s| s.positive).count(), 1000);
        let unique: HashSet<&str> = c.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(unique.len(), 2000);
        assert_eq!(c, generate_probe_corpus(&bank, 5, 2000).unwrap());
        assert_ne!(c, generate_probe_corpus(&bank, 6, 2000).unwrap());
    }

    #[test]
    fn oversized_request_fails() {
        let bank = ProbeCorpusBank::builtin();
        assert!(generate_probe_corpus(&bank, 1, 100_000).is_err());
    }
}
