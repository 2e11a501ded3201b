// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;

use patchlab::datagen::{
    generate_contextual_suite, generate_lexical_suite, locate_target_positions, Lexicon,
    Phenomenon, ProbeCorpusBank, SuiteKind, TestSuite, CONTEXTUAL_SUITE_SIZE, LEXICAL_SUITE_SIZE,
};
use patchlab::Error;
use proptest::prelude::*;

const MAX_SENTENCE_TOKENS: usize = 64;

fn suites() -> [TestSuite; 2] {
    let lex = Lexicon::builtin();
    [
        generate_lexical_suite(&lex, 11, LEXICAL_SUITE_SIZE).unwrap(),
        generate_contextual_suite(&lex, 12, CONTEXTUAL_SUITE_SIZE).unwrap(),
    ]
}

#[test]
fn every_generated_pair_aligns_and_fits_the_context() {
    let tok = common::tokenizer();
    for suite in suites() {
        for pair in &suite.pairs {
            let pos = locate_target_positions(pair, tok)
                .unwrap_or_else(|e| panic!("{}: {e}", pair.template_id));
            assert!(pos.clean.tokens.len() <= MAX_SENTENCE_TOKENS, "{}", pair.clean);
            assert!(pos.corrupted.tokens.len() <= MAX_SENTENCE_TOKENS, "{}", pair.corrupted);
            assert!(!pos.clean.target.is_empty());
            assert!(!pos.aligned_targets().is_empty(), "{}", pair.template_id);
            for s in [&pos.clean, &pos.corrupted] {
                assert!(s.target.iter().all(|p| !s.control.contains(p)));
                assert!(!s.control.contains(&0));
            }
            // Aligned positions carry the same token outside the substituted spans.
            for (a, b) in pos.alignment.iter().enumerate() {
                if let Some(b) = b {
                    if !pos.clean.target.contains(&a) {
                        assert_eq!(pos.clean.tokens.ids[a], pos.corrupted.tokens.ids[*b]);
                    }
                }
            }
        }
    }
}

#[test]
fn every_template_renders_within_the_token_limit() {
    let tok = common::tokenizer();
    let lex = Lexicon::builtin();
    for code in Phenomenon::ALL {
        let bank = lex.check_phenomenon(code).unwrap();
        assert_eq!(bank.templates.len(), 10, "{code}");
    }
    // Longest fillers everywhere give an upper bound on sentence length.
    let suite = generate_contextual_suite(&lex, 99, 2000).unwrap();
    let longest = suite
        .pairs
        .iter()
        .map(|p| tok.encode(&p.clean).len().max(tok.encode(&p.corrupted).len()))
        .max()
        .unwrap();
    assert!(longest <= MAX_SENTENCE_TOKENS, "{longest}");
}

#[test]
fn intensified_swap_targets_only_the_changed_word() {
    let tok = common::tokenizer();
    let lex = Lexicon::builtin();
    let suite = generate_contextual_suite(&lex, 3, 1400).unwrap();
    let pair = suite
        .pairs
        .iter()
        .find(|p| p.phenomenon == Phenomenon::C3)
        .unwrap();
    let pos = locate_target_positions(pair, tok).unwrap();
    let changed: Vec<String> = pos
        .clean
        .target
        .iter()
        .map(|&p| {
            let (s, e) = pos.clean.tokens.offsets[p];
            pair.clean[s..e].to_string()
        })
        .collect();
    let joined = changed.concat();
    assert_eq!(joined.trim(), pair.clean_slots[0].text(&pair.clean).trim());
    assert_eq!(joined.trim(), pair.key_word);
}

#[test]
fn single_word_substitution_has_one_target_token() {
    let tok = common::tokenizer();
    let lex = Lexicon::builtin();
    let suite = generate_contextual_suite(&lex, 4, 1400).unwrap();
    let pair = suite
        .pairs
        .iter()
        .find(|p| {
            p.phenomenon == Phenomenon::C1
                && tok.encode(&format!(" {}", p.key_word)).len() == 1
        })
        .unwrap();
    let pos = locate_target_positions(pair, tok).unwrap();
    assert_eq!(pos.clean.target.len(), 1);
    assert_eq!(pos.aligned_targets(), pos.clean.target);
}

#[test]
fn tampered_pair_is_rejected() {
    let tok = common::tokenizer();
    let suite = generate_lexical_suite(&Lexicon::builtin(), 1, 60).unwrap();
    let mut pair = suite.pairs[0].clone();
    pair.corrupted.insert_str(0, "Sadly ");
    assert!(matches!(
        locate_target_positions(&pair, tok),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn probe_words_are_disjoint_from_suite_vocabulary() {
    let lex = Lexicon::builtin();
    let probe = ProbeCorpusBank::builtin().adjectives();
    let mut suite_words = BTreeSet::new();
    for bank in lex.phenomena.values() {
        suite_words.extend(bank.vocabulary());
    }
    let shared: Vec<_> = probe.intersection(&suite_words).collect();
    assert!(shared.is_empty(), "{shared:?}");
}

#[test]
fn suites_are_seeded_and_round_trip_through_jsonl() {
    let lex = Lexicon::builtin();
    let a = generate_lexical_suite(&lex, 7, 300).unwrap();
    assert_eq!(a, generate_lexical_suite(&lex, 7, 300).unwrap());
    assert_ne!(a.pairs, generate_lexical_suite(&lex, 8, 300).unwrap().pairs);
    let mut buf = Vec::new();
    a.write_jsonl(&mut buf).unwrap();
    let b = TestSuite::read_jsonl(SuiteKind::Lexical, 7, buf.as_slice()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn targets_and_controls_never_overlap(seed in any::<u64>()) {
        let tok = common::tokenizer();
        let lex = Lexicon::builtin();
        let suite = generate_contextual_suite(&lex, seed, 140).unwrap();
        for pair in &suite.pairs {
            let pos = locate_target_positions(pair, tok).unwrap();
            for s in [&pos.clean, &pos.corrupted] {
                prop_assert!(s.target.iter().all(|p| !s.control.contains(p)));
            }
        }
    }
}
