// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream activation patching.
//!
//! Patching layer `l` overwrites rows of the stream leaving block `l`
//! (`resid[l + 1]`) with rows from a source run, so block `l + 1`, or the
//! final layernorm when `l` is the last layer, reads the patched values.
//! Within a pair the clean sentence is the target and the corrupted
//! sentence the source.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{locate_target_positions, PairPositions, TestPair};
use crate::error::{Error, Result};
use crate::model::{Model, ResidualCache};
use crate::probe::Probe;
use crate::tokenizer::Tokenizer;

/// Recorded in every report.
pub const PATCH_DIRECTION: &str = "source = corrupted, target = clean";

/// Which rows of a target run to overwrite, and from where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSpec {
    pub layer: usize,
    pub positions: PatchPositions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchPositions {
    /// Every position; source and target must have equal length.
    All,
    /// `(target position, source position)` pairs.
    Mapped(Vec<(usize, usize)>),
}

impl PatchSpec {
    pub fn all(layer: usize) -> Self {
        Self {
            layer,
            positions: PatchPositions::All,
        }
    }

    pub fn mapped(layer: usize, writes: Vec<(usize, usize)>) -> Self {
        Self {
            layer,
            positions: PatchPositions::Mapped(writes),
        }
    }

    /// Row writes for sequences of the given lengths, after validation.
    pub fn writes(&self, n_layers: usize, target_len: usize, source_len: usize) -> Result<Vec<(usize, usize)>> {
        if self.layer >= n_layers {
            return Err(Error::Domain(format!(
                "patch layer {} out of range for {n_layers} layers",
                self.layer
            )));
        }
        match &self.positions {
            PatchPositions::All => {
                if target_len != source_len {
                    return Err(Error::Alignment(format!(
                        "all-position patch needs equal lengths, got target {target_len} and source {source_len}"
                    )));
                }
                Ok((0..target_len).map(|p| (p, p)).collect())
            }
            PatchPositions::Mapped(w) => {
                let mut seen = vec![false; target_len];
                for &(t, s) in w {
                    if t >= target_len || s >= source_len {
                        return Err(Error::Alignment(format!(
                            "patch maps source {s} to target {t}, lengths are {source_len} and {target_len}"
                        )));
                    }
                    if std::mem::replace(&mut seen[t], true) {
                        return Err(Error::Alignment(format!(
                            "target position {t} written twice"
                        )));
                    }
                }
                Ok(w.clone())
            }
        }
    }
}

fn overwrite(dst: &mut Array2<f32>, src: &Array2<f32>, writes: &[(usize, usize)]) {
    for &(t, s) in writes {
        dst.row_mut(t).assign(&src.row(s));
    }
}

/// Forward pass on `target_ids` with `spec`'s rows taken from `source_cache`.
pub fn run_with_patch(
    model: &Model,
    target_ids: &[u32],
    source_cache: &ResidualCache,
    spec: &PatchSpec,
) -> Result<(Array2<f32>, ResidualCache)> {
    let writes = spec.writes(model.n_layers(), target_ids.len(), source_cache.seq_len())?;
    let target = model.run_cache(target_ids)?;
    let cache = patch_from(model, &target, source_cache, spec.layer, &writes);
    let logits = model.unembed(&cache.final_post_ln);
    Ok((logits, cache))
}

/// Patched cache reusing an unpatched target cache up to the patch point.
fn patch_from(
    model: &Model,
    target: &ResidualCache,
    source: &ResidualCache,
    layer: usize,
    writes: &[(usize, usize)],
) -> ResidualCache {
    let mut resid: Vec<Array2<f32>> = target.resid[..=layer + 1].to_vec();
    overwrite(&mut resid[layer + 1], &source.resid[layer + 1], writes);
    model.continue_from(resid)
}

/// Positive-class probability for the last-token final representation.
pub fn sentiment_score(model: &Model, probe: &Probe, ids: &[u32]) -> Result<f64> {
    let cache = model.run_cache(ids)?;
    score_cache(probe, &cache)
}

fn score_cache(probe: &Probe, cache: &ResidualCache) -> Result<f64> {
    probe.predict_f32(cache.last_representation())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    TargetWords,
    ControlWords,
    All,
}

impl PositionMode {
    pub const ALL_MODES: [PositionMode; 3] = [Self::TargetWords, Self::ControlWords, Self::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TargetWords => "target-words",
            Self::ControlWords => "control-words",
            Self::All => "all",
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Self::TargetWords => 0,
            Self::ControlWords => 1,
            Self::All => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL_MODES.get(usize::from(i)).copied()
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL_MODES
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown position mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEffect {
    pub pair_id: u32,
    pub layer: usize,
    pub mode: PositionMode,
    /// Clean-sentence positions overwritten.
    pub positions: Vec<usize>,
    pub score_clean: f64,
    pub score_patched: f64,
    pub effect: f64,
}

/// A pair tokenized, aligned and run once in each direction.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub pair_id: u32,
    pub clean_ids: Vec<u32>,
    pub corrupted_ids: Vec<u32>,
    pub positions: PairPositions,
    pub clean_cache: ResidualCache,
    pub corrupted_cache: ResidualCache,
    pub score_clean: f64,
    pub score_corrupted: f64,
}

impl PreparedPair {
    pub fn new(model: &Model, probe: &Probe, tokenizer: &Tokenizer, pair: &TestPair) -> Result<Self> {
        let positions = locate_target_positions(pair, tokenizer)?;
        let clean_ids = positions.clean.tokens.ids.clone();
        let corrupted_ids = positions.corrupted.tokens.ids.clone();
        let clean_cache = model.run_cache(&clean_ids)?;
        let corrupted_cache = model.run_cache(&corrupted_ids)?;
        Ok(Self {
            pair_id: pair.id,
            score_clean: score_cache(probe, &clean_cache)?,
            score_corrupted: score_cache(probe, &corrupted_cache)?,
            clean_ids,
            corrupted_ids,
            positions,
            clean_cache,
            corrupted_cache,
        })
    }

    /// `(clean position, corrupted position)` writes for a mode.
    pub fn writes(&self, mode: PositionMode) -> Vec<(usize, usize)> {
        let clean = match mode {
            PositionMode::TargetWords => self.positions.aligned_targets(),
            PositionMode::ControlWords => self.positions.clean.control.clone(),
            PositionMode::All => self.positions.aligned_all(),
        };
        clean
            .into_iter()
            .filter_map(|p| self.positions.alignment[p].map(|s| (p, s)))
            .collect()
    }
}

/// Effect of patching one layer of the clean run from the corrupted run.
pub fn patch_effect(
    model: &Model,
    probe: &Probe,
    pair: &PreparedPair,
    layer: usize,
    mode: PositionMode,
) -> Result<PatchEffect> {
    let writes = pair.writes(mode);
    patch_effect_with(model, probe, pair, layer, mode, &writes)
}

fn patch_effect_with(
    model: &Model,
    probe: &Probe,
    pair: &PreparedPair,
    layer: usize,
    mode: PositionMode,
    writes: &[(usize, usize)],
) -> Result<PatchEffect> {
    let spec = PatchSpec::mapped(layer, writes.to_vec());
    let writes = spec.writes(model.n_layers(), pair.clean_ids.len(), pair.corrupted_ids.len())?;
    let score_patched = if writes.is_empty() {
        pair.score_clean
    } else {
        let cache = patch_from(model, &pair.clean_cache, &pair.corrupted_cache, layer, &writes);
        score_cache(probe, &cache)?
    };
    Ok(PatchEffect {
        pair_id: pair.pair_id,
        layer,
        mode,
        positions: writes.iter().map(|&(t, _)| t).collect(),
        score_clean: pair.score_clean,
        score_patched,
        effect: score_patched - pair.score_clean,
    })
}

/// One effect per layer, reusing the pair's cached clean and corrupted runs.
pub fn layer_sweep(
    model: &Model,
    probe: &Probe,
    pair: &PreparedPair,
    mode: PositionMode,
) -> Result<Vec<PatchEffect>> {
    let writes = pair.writes(mode);
    (0..model.n_layers())
        .map(|layer| patch_effect_with(model, probe, pair, layer, mode, &writes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in PositionMode::ALL_MODES {
            assert_eq!(m.as_str().parse::<PositionMode>().unwrap(), m);
            assert_eq!(PositionMode::from_index(m.index()), Some(m));
        }
        assert!("middle".parse::<PositionMode>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(PatchSpec::all(3).writes(3, 4, 4), Err(Error::Domain(_))));
        assert!(matches!(PatchSpec::all(0).writes(3, 4, 5), Err(Error::Alignment(_))));
        assert!(matches!(
            PatchSpec::mapped(0, vec![(4, 0)]).writes(3, 4, 5),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            PatchSpec::mapped(0, vec![(1, 0), (1, 2)]).writes(3, 4, 5),
            Err(Error::Alignment(_))
        ));
        assert_eq!(
            PatchSpec::mapped(2, vec![(3, 4)]).writes(3, 4, 5).unwrap(),
            vec![(3, 4)]
        );
    }
}
