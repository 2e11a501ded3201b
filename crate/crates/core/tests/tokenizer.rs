// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::io::BufRead;

use patchlab::tokenizer::{Tokenizer, GPT2_VOCAB_SIZE};
use patchlab::Error;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Golden {
    text: String,
    ids: Vec<u32>,
}

fn goldens() -> Vec<Golden> {
    let f = std::fs::File::open(common::assets().join("gpt2/tokenizer_golden.jsonl")).unwrap();
    std::io::BufReader::new(f)
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect()
}

#[test]
fn loads_full_vocabulary() {
    assert_eq!(common::tokenizer().vocab_size(), GPT2_VOCAB_SIZE);
}

#[test]
fn golden_parity_with_reference_tokenizer() {
    let tok = common::tokenizer();
    let cases = goldens();
    assert!(cases.len() >= 200);
    for g in &cases {
        let seq = tok.encode(&g.text);
        assert_eq!(seq.ids, g.ids, "{:?}", g.text);
        assert_eq!(tok.decode(&g.ids).unwrap(), g.text);
    }
}

#[test]
fn known_sentence() {
    let seq = common::tokenizer().encode("The movie was good");
    assert_eq!(seq.ids, vec![464, 3807, 373, 922]);
    assert_eq!(seq.offsets, vec![(0, 3), (3, 9), (9, 13), (13, 18)]);
}

#[test]
fn empty_input_and_out_of_range_ids() {
    let tok = common::tokenizer();
    assert!(tok.encode("").is_empty());
    assert_eq!(tok.decode(&[]).unwrap(), "");
    assert!(matches!(tok.decode(&[50_257]), Err(Error::Domain(_))));
    assert_eq!(tok.decode(&[50_256]).unwrap(), "<|endoftext|>");
}

fn vocab_text() -> String {
    std::fs::read_to_string(common::assets().join("gpt2/encoder.json")).unwrap()
}

fn merges_text() -> String {
    std::fs::read_to_string(common::assets().join("gpt2/vocab.bpe")).unwrap()
}

#[test]
fn empty_merges_is_an_integrity_error() {
    let err = Tokenizer::from_strings(&vocab_text(), "#version: 0.2\n", "vocab").unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
    let err = Tokenizer::from_strings(&vocab_text(), "", "vocab").unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn duplicate_id_is_an_integrity_error() {
    let mut vocab: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&vocab_text()).unwrap();
    vocab.insert("Ġgood".into(), serde_json::json!(464));
    let err = Tokenizer::from_strings(&serde_json::to_string(&vocab).unwrap(), &merges_text(), "v")
        .unwrap_err();
    assert!(matches!(err, Error::Integrity(ref m) if m.contains("464")), "{err}");
}

#[test]
fn wrong_vocabulary_size_is_an_integrity_error() {
    let mut vocab: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&vocab_text()).unwrap();
    vocab.remove("<|endoftext|>");
    let err = Tokenizer::from_strings(&serde_json::to_string(&vocab).unwrap(), &merges_text(), "v")
        .unwrap_err();
    assert!(matches!(err, Error::Integrity(ref m) if m.contains("50256")), "{err}");
}

#[test]
fn malformed_merge_line_names_the_line() {
    let mut merges = merges_text();
    merges = merges.replacen("Ġ t\n", "Ġ t extra\n", 1);
    let err = Tokenizer::from_strings(&vocab_text(), &merges, "v").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    let err = Tokenizer::from_strings("{not json", &merges_text(), "encoder.json").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Tokenizer::load("/nonexistent/encoder.json", "/nonexistent/vocab.bpe").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_and_offsets_cover_input(text in "\\PC{0,48}|[ a-zA-Z0-9'.,!\n\t]{0,64}") {
        let tok = common::tokenizer();
        let seq = tok.encode(&text);
        prop_assert_eq!(tok.decode(&seq.ids).unwrap(), text.clone());
        prop_assert!(seq.ids.iter().all(|&id| (id as usize) < GPT2_VOCAB_SIZE));
        let mut cursor = 0;
        for &(s, e) in &seq.offsets {
            prop_assert_eq!(s, cursor);
            prop_assert!(e > s);
            cursor = e;
        }
        prop_assert_eq!(cursor, text.len());
        // Each token's bytes are exactly the source bytes it claims to cover.
        for (i, &(s, e)) in seq.offsets.iter().enumerate() {
            prop_assert_eq!(tok.decode_bytes(&seq.ids[i..=i]).unwrap(), text.as_bytes()[s..e].to_vec());
        }
    }
}
