// SPDX-License-Identifier: MIT OR Apache-2.0

//! Persisted sweep output: one row per pair and one per (pair, mode, layer).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Phenomenon, SuiteKind, TestPair};
use crate::error::{Error, Result};
use crate::metrics::{EffectTensor, PairEffects};
use crate::patching::{PatchEffect, PositionMode, PreparedPair};

pub const PAIRS_CSV: &str = "effects/pairs.csv";
pub const EFFECTS_CSV: &str = "effects/effects.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub suite: String,
    pub pair_id: u32,
    pub phenomenon: Phenomenon,
    pub template_id: String,
    pub key_word: String,
    pub context: String,
    pub clean_tokens: usize,
    pub corrupted_tokens: usize,
    pub score_clean: f64,
    pub score_corrupted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub suite: String,
    pub pair_id: u32,
    pub phenomenon: Phenomenon,
    pub layer: usize,
    pub position_mode: PositionMode,
    pub n_positions: usize,
    pub score_clean: f64,
    pub score_patched: f64,
    pub effect: f64,
}

/// Everything the sweep learned about one pair.
#[derive(Debug, Clone)]
pub struct PairSweep {
    pub suite: SuiteKind,
    pub pair: TestPair,
    pub clean_tokens: usize,
    pub corrupted_tokens: usize,
    pub score_clean: f64,
    pub score_corrupted: f64,
    pub sweeps: Vec<(PositionMode, Vec<PatchEffect>)>,
}

impl PairSweep {
    pub fn new(suite: SuiteKind, pair: &TestPair, prepared: &PreparedPair, sweeps: Vec<(PositionMode, Vec<PatchEffect>)>) -> Self {
        Self {
            suite,
            pair: pair.clone(),
            clean_tokens: prepared.clean_ids.len(),
            corrupted_tokens: prepared.corrupted_ids.len(),
            score_clean: prepared.score_clean,
            score_corrupted: prepared.score_corrupted,
            sweeps,
        }
    }
}

/// Pairs of one (suite, mode) and their per-layer effects, index-aligned.
type Grid = (Vec<TestPair>, Vec<Vec<PatchEffect>>);

/// Tensors feeding the analysis, keyed by suite and mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EffectSet {
    pub lexical_target: Option<EffectTensor>,
    pub lexical_control: Option<EffectTensor>,
    pub contextual: Option<EffectTensor>,
}

impl EffectSet {
    fn slot(&mut self, suite: SuiteKind, mode: PositionMode) -> Result<&mut Option<EffectTensor>> {
        match (suite, mode) {
            (SuiteKind::Lexical, PositionMode::TargetWords) => Ok(&mut self.lexical_target),
            (SuiteKind::Lexical, PositionMode::ControlWords) => Ok(&mut self.lexical_control),
            (SuiteKind::Contextual, PositionMode::All) => Ok(&mut self.contextual),
            _ => Err(Error::Metric(format!(
                "no analysis uses the {} suite in {mode} mode",
                suite.name()
            ))),
        }
    }

    pub fn from_sweeps(n_layers: usize, sweeps: &[PairSweep]) -> Result<Self> {
        let mut grouped: BTreeMap<(SuiteKind, PositionMode), Grid> = BTreeMap::new();
        for s in sweeps {
            for (mode, effects) in &s.sweeps {
                let g = grouped.entry((s.suite, *mode)).or_default();
                g.0.push(s.pair.clone());
                g.1.push(effects.clone());
            }
        }
        let mut set = Self::default();
        for ((suite, mode), (pairs, effects)) in grouped {
            *set.slot(suite, mode)? = Some(EffectTensor::from_sweeps(n_layers, mode, &pairs, &effects)?);
        }
        Ok(set)
    }
}

pub fn suite_from_name(name: &str) -> Result<SuiteKind> {
    [SuiteKind::Lexical, SuiteKind::Contextual]
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown suite `{name}`")))
}

fn csv_err(file: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        file: file.into(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>, file: &str) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err(file))?;
    }
    w.into_inner().map_err(|e| Error::Bundle(format!("{file}: {e}")))
}

fn from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8], file: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(file))
}

/// `(pairs.csv, effects.csv)` contents, in sweep order.
pub fn write_csv(sweeps: &[PairSweep]) -> Result<(Vec<u8>, Vec<u8>)> {
    let pairs = to_csv(
        sweeps.iter().map(|s| PairRow {
            suite: s.suite.name().into(),
            pair_id: s.pair.id,
            phenomenon: s.pair.phenomenon,
            template_id: s.pair.template_id.clone(),
            key_word: s.pair.key_word.clone(),
            context: s.pair.context.clone(),
            clean_tokens: s.clean_tokens,
            corrupted_tokens: s.corrupted_tokens,
            score_clean: s.score_clean,
            score_corrupted: s.score_corrupted,
        }),
        PAIRS_CSV,
    )?;
    let effects = to_csv(
        sweeps.iter().flat_map(|s| {
            s.sweeps.iter().flat_map(move |(_, effects)| {
                effects.iter().map(move |e| EffectRow {
                    suite: s.suite.name().into(),
                    pair_id: e.pair_id,
                    phenomenon: s.pair.phenomenon,
                    layer: e.layer,
                    position_mode: e.mode,
                    n_positions: e.positions.len(),
                    score_clean: e.score_clean,
                    score_patched: e.score_patched,
                    effect: e.effect,
                })
            })
        }),
        EFFECTS_CSV,
    )?;
    Ok((pairs, effects))
}

/// Rebuild analysis tensors from the two CSV files.
pub fn read_csv(n_layers: usize, pairs_csv: &[u8], effects_csv: &[u8]) -> Result<EffectSet> {
    let pairs: Vec<PairRow> = from_csv(pairs_csv, PAIRS_CSV)?;
    let mut meta: BTreeMap<(SuiteKind, u32), &PairRow> = BTreeMap::new();
    for p in &pairs {
        if meta.insert((suite_from_name(&p.suite)?, p.pair_id), p).is_some() {
            return Err(Error::Integrity(format!("{PAIRS_CSV}: pair {} of {} listed twice", p.pair_id, p.suite)));
        }
    }
    let rows: Vec<EffectRow> = from_csv(effects_csv, EFFECTS_CSV)?;
    let mut grid: BTreeMap<(SuiteKind, PositionMode, u32), Vec<Option<&EffectRow>>> = BTreeMap::new();
    for r in &rows {
        let suite = suite_from_name(&r.suite)?;
        let p = meta.get(&(suite, r.pair_id)).ok_or_else(|| {
            Error::Integrity(format!("{EFFECTS_CSV}: pair {} of {} missing from {PAIRS_CSV}", r.pair_id, r.suite))
        })?;
        if p.phenomenon != r.phenomenon || r.layer >= n_layers {
            return Err(Error::Integrity(format!(
                "{EFFECTS_CSV}: row for pair {} layer {} disagrees with the pair table or layer count",
                r.pair_id, r.layer
            )));
        }
        let cells = grid.entry((suite, r.position_mode, r.pair_id)).or_insert_with(|| vec![None; n_layers]);
        if cells[r.layer].replace(r).is_some() {
            return Err(Error::Integrity(format!(
                "{EFFECTS_CSV}: pair {} layer {} {} listed twice",
                r.pair_id, r.layer, r.position_mode
            )));
        }
    }
    let mut by_tensor: BTreeMap<(SuiteKind, PositionMode), Vec<PairEffects>> = BTreeMap::new();
    for ((suite, mode, id), cells) in grid {
        let cells: Vec<&EffectRow> = cells.into_iter().collect::<Option<_>>().ok_or_else(|| {
            Error::Integrity(format!("{EFFECTS_CSV}: pair {id} {mode} is missing layers"))
        })?;
        let p = meta[&(suite, id)];
        by_tensor.entry((suite, mode)).or_default().push(PairEffects {
            pair_id: id,
            phenomenon: p.phenomenon,
            key_word: p.key_word.clone(),
            context: p.context.clone(),
            score_clean: cells[0].score_clean,
            score_patched: cells.iter().map(|c| c.score_patched).collect(),
            effects: cells.iter().map(|c| c.effect).collect(),
        });
    }
    let mut set = EffectSet::default();
    for ((suite, mode), rows) in by_tensor {
        *set.slot(suite, mode)? = Some(EffectTensor::new(n_layers, mode, rows)?);
    }
    Ok(set)
}
