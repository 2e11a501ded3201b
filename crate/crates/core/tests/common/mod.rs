// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::OnceLock;

use patchlab::model::{Model, ModelConfig};
use patchlab::tokenizer::Tokenizer;

pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

pub fn tokenizer() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let dir = assets().join("gpt2");
        Tokenizer::load(dir.join("encoder.json"), dir.join("vocab.bpe")).expect("tokenizer assets")
    })
}

pub fn fixture_dir() -> PathBuf {
    assets().join("fixtures/tiny-gpt2")
}

pub fn fixture_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        Model::load(fixture_dir().join("model.safetensors"), ModelConfig::tiny_fixture())
            .expect("fixture model")
    })
}

/// Converted GPT-2 117M archive, when `PATCHLAB_GPT2_ARCHIVE` points at one.
pub fn gpt2_archive() -> Option<PathBuf> {
    std::env::var_os("PATCHLAB_GPT2_ARCHIVE")
        .map(PathBuf::from)
        .filter(|p| p.exists())
}
