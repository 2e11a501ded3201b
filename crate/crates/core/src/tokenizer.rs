// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer compatible with the published GPT-2 vocabulary.
//!
//! Reads the distributed `encoder.json` (token string → id) and `vocab.bpe`
//! (ranked merges, first line a `#version` header) files unchanged. Every
//! emitted token carries the byte range of the source text it covers, which
//! is what the patching engine uses to turn substituted spans into token
//! positions.
//!
//! No special tokens are inserted; `<|endoftext|>` in the input is encoded
//! as ordinary text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

/// Size of the published GPT-2 vocabulary.
pub const GPT2_VOCAB_SIZE: usize = 50_257;

const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Token ids plus the byte span of the source string each token covers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `(start, end)` byte offsets, half-open, ordered and contiguous.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions of tokens whose byte range intersects `[start, end)`.
    pub fn positions_overlapping(&self, start: usize, end: usize) -> Vec<usize> {
        self.offsets
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s < end && start < e)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sequence made only of ids, with empty offsets. Used for synthetic inputs.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let offsets = (0..ids.len()).map(|i| (i, i + 1)).collect();
        Self { ids, offsets }
    }
}

/// GPT-2 byte-level BPE tokenizer. Immutable after load.
#[derive(Debug)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    pretokenizer: Regex,
}

/// The reversible byte → printable-unicode table GPT-2 applies before BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut direct: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    direct.extend(0xA1..=0xAC);
    direct.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if direct.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

impl Tokenizer {
    /// Load from the published `encoder.json` and `vocab.bpe` files.
    pub fn load(vocab_file: impl AsRef<Path>, merges_file: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_file.as_ref();
        let merges_path = merges_file.as_ref();
        let vocab_text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges_text = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strings(&vocab_text, &merges_text, &vocab_path.display().to_string())
    }

    /// Parse already-read file contents. `source` only labels errors.
    pub fn from_strings(vocab_json: &str, merges_text: &str, source: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| Error::Parse {
                file: source.to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        if encoder.len() != GPT2_VOCAB_SIZE {
            return Err(Error::Integrity(format!(
                "vocabulary has {} entries, expected {GPT2_VOCAB_SIZE}",
                encoder.len()
            )));
        }
        let mut decoder = vec![None; encoder.len()];
        for (token, &id) in &encoder {
            let slot = decoder.get_mut(id as usize).ok_or_else(|| {
                Error::Integrity(format!("token {token:?} has out-of-range id {id}"))
            })?;
            if let Some(prev) = slot.replace(token.clone()) {
                return Err(Error::Integrity(format!(
                    "id {id} assigned to both {prev:?} and {token:?}"
                )));
            }
        }
        // Pigeonhole: len == vocab size and no duplicates means every slot is filled.
        let decoder: Vec<String> = decoder.into_iter().map(Option::unwrap_or_default).collect();

        let mut merge_ranks = HashMap::new();
        for (idx, raw) in merges_text.lines().enumerate() {
            let line_no = idx + 1;
            if idx == 0 && raw.starts_with("#version") {
                continue;
            }
            if raw.trim().is_empty() {
                continue;
            }
            let mut parts = raw.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    file: "merges".to_string(),
                    line: line_no,
                    message: format!("expected two space-separated symbols, got {raw:?}"),
                });
            };
            if a.is_empty() || b.is_empty() {
                return Err(Error::Parse {
                    file: "merges".to_string(),
                    line: line_no,
                    message: format!("empty merge symbol in {raw:?}"),
                });
            }
            let merged = format!("{a}{b}");
            if !encoder.contains_key(&merged) {
                return Err(Error::Integrity(format!(
                    "merge on line {line_no} produces {merged:?}, which is not in the vocabulary"
                )));
            }
            let rank = merge_ranks.len();
            merge_ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }
        if merge_ranks.is_empty() {
            return Err(Error::Integrity("merges file contains no merge rules".into()));
        }

        let byte_to_char = bytes_to_unicode();
        for c in byte_to_char {
            if !encoder.contains_key(&c.to_string()) {
                return Err(Error::Integrity(format!(
                    "byte symbol {c:?} missing from vocabulary"
                )));
            }
        }
        let char_to_byte = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        Ok(Self {
            encoder,
            decoder,
            merge_ranks,
            byte_to_char,
            char_to_byte,
            pretokenizer: Regex::new(PRETOKENIZE_PATTERN).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    /// Token string (in byte-remapped form) for an id.
    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for m in self.pretokenizer.find_iter(text) {
            // The pattern has no failure modes on valid UTF-8 beyond backtrack limits,
            // which these short alternations never approach.
            let m = m.expect("pretokenizer backtrack limit");
            self.encode_piece(m.as_str(), m.start(), &mut seq);
        }
        seq
    }

    fn encode_piece(&self, piece: &str, base: usize, out: &mut TokenSequence) {
        // Each symbol tracks its byte length so offsets survive merging.
        let mut symbols: Vec<(String, usize)> = piece
            .bytes()
            .map(|b| (self.byte_to_char[b as usize].to_string(), 1))
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].0.clone(), w[1].0.clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, first)) = best else { break };
            let (a, b) = (symbols[first].clone(), symbols[first + 1].clone());
            // Merge every non-overlapping occurrence of the winning pair, left to right.
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i].0 == a.0 && symbols[i + 1].0 == b.0 {
                    merged.push((format!("{}{}", a.0, b.0), symbols[i].1 + symbols[i + 1].1));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        let mut cursor = base;
        for (sym, len) in symbols {
            let id = self.encoder[&sym];
            out.ids.push(id);
            out.offsets.push((cursor, cursor + len));
            cursor += len;
        }
    }

    /// Raw bytes for a sequence of ids.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self.decoder.get(id as usize).ok_or_else(|| {
                Error::Domain(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.decoder.len()
                ))
            })?;
            bytes.extend(token.chars().map(|c| self.char_to_byte[&c]));
        }
        Ok(bytes)
    }

    /// Inverse of [`Tokenizer::encode`]. Byte sequences that are not valid UTF-8
    /// (possible for arbitrary id lists) are decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b'A' as usize], 'A');
        assert_eq!(table[b' ' as usize], '\u{120}');
        assert_eq!(table[b'\n' as usize], '\u{10A}');
    }

    #[test]
    fn positions_overlapping_uses_half_open_ranges() {
        let seq = TokenSequence {
            ids: vec![1, 2, 3],
            offsets: vec![(0, 3), (3, 8), (8, 10)],
        };
        assert_eq!(seq.positions_overlapping(4, 6), vec![1]);
        assert_eq!(seq.positions_overlapping(3, 9), vec![1, 2]);
        assert!(seq.positions_overlapping(10, 12).is_empty());
    }
}
