// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregate statistics over patching effects and hypothesis verdicts.
//!
//! Every aggregate works on effect magnitudes `|effect|`. Pairs are kept
//! sorted by id, so results do not depend on the order pairs were added.

mod report;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::{Phenomenon, TestPair};
use crate::error::{Error, Result};
use crate::patching::{PatchEffect, PositionMode};

pub use report::{
    analyze, evaluate_hypotheses, published_reference, AnalysisConfig, AnalysisInputs, BandValues,
    ContextualMetrics, HypothesisThresholds, LexicalMetrics, MetricReport, PhenomenonProfile,
    Status, Verdict, REPORT_VERSION,
};
pub use stats::TestResult;

/// Per-layer effects for one pair in one position mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEffects {
    pub pair_id: u32,
    pub phenomenon: Phenomenon,
    pub key_word: String,
    pub context: String,
    pub score_clean: f64,
    pub score_patched: Vec<f64>,
    pub effects: Vec<f64>,
}

/// Complete (pair × layer) grid of effects for one position mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTensor {
    n_layers: usize,
    mode: PositionMode,
    pairs: Vec<PairEffects>,
}

impl EffectTensor {
    pub fn new(n_layers: usize, mode: PositionMode, mut pairs: Vec<PairEffects>) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Metric("effect tensor needs at least one layer".into()));
        }
        pairs.sort_by_key(|p| p.pair_id);
        for w in pairs.windows(2) {
            if w[0].pair_id == w[1].pair_id {
                return Err(Error::Metric(format!("pair {} appears twice", w[0].pair_id)));
            }
        }
        for p in &pairs {
            if p.effects.len() != n_layers || p.score_patched.len() != n_layers {
                return Err(Error::Metric(format!(
                    "pair {} has {} effects for {n_layers} layers",
                    p.pair_id,
                    p.effects.len()
                )));
            }
            if p.effects.iter().chain(&p.score_patched).any(|v| !v.is_finite())
                || !p.score_clean.is_finite()
            {
                return Err(Error::Metric(format!("pair {} has non-finite values", p.pair_id)));
            }
        }
        Ok(Self { n_layers, mode, pairs })
    }

    /// Assemble from sweep output; `sweeps[i]` belongs to `pairs[i]`.
    pub fn from_sweeps(
        n_layers: usize,
        mode: PositionMode,
        pairs: &[TestPair],
        sweeps: &[Vec<PatchEffect>],
    ) -> Result<Self> {
        if pairs.len() != sweeps.len() {
            return Err(Error::Metric(format!(
                "{} pairs but {} sweeps",
                pairs.len(),
                sweeps.len()
            )));
        }
        let rows = pairs
            .iter()
            .zip(sweeps)
            .map(|(pair, sweep)| {
                let mut ordered = sweep.clone();
                ordered.sort_by_key(|e| e.layer);
                if ordered.iter().enumerate().any(|(l, e)| {
                    e.layer != l || e.pair_id != pair.id || e.mode != mode
                }) {
                    return Err(Error::Metric(format!(
                        "sweep for pair {} is incomplete or mislabeled",
                        pair.id
                    )));
                }
                Ok(PairEffects {
                    pair_id: pair.id,
                    phenomenon: pair.phenomenon,
                    key_word: pair.key_word.clone(),
                    context: pair.context.clone(),
                    score_clean: ordered.first().map_or(0.0, |e| e.score_clean),
                    score_patched: ordered.iter().map(|e| e.score_patched).collect(),
                    effects: ordered.iter().map(|e| e.effect).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_layers, mode, rows)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn mode(&self) -> PositionMode {
        self.mode
    }

    pub fn pairs(&self) -> &[PairEffects] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair_ids(&self) -> Vec<u32> {
        self.pairs.iter().map(|p| p.pair_id).collect()
    }

    fn non_empty(&self) -> Result<()> {
        if self.pairs.is_empty() {
            Err(Error::Metric(format!("{} effect tensor is empty", self.mode)))
        } else {
            Ok(())
        }
    }

    /// Keep only pairs whose key word occurs in at least `min` distinct contexts.
    /// Returns the filtered tensor and the dropped words.
    pub fn with_min_contexts(&self, min: usize) -> (Self, Vec<String>) {
        let mut contexts: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for p in &self.pairs {
            contexts.entry(&p.key_word).or_default().insert(&p.context);
        }
        let dropped: Vec<String> = contexts
            .iter()
            .filter(|(_, c)| c.len() < min)
            .map(|(w, _)| w.to_string())
            .collect();
        let pairs = self
            .pairs
            .iter()
            .filter(|p| !dropped.contains(&p.key_word))
            .cloned()
            .collect();
        (
            Self {
                n_layers: self.n_layers,
                mode: self.mode,
                pairs,
            },
            dropped,
        )
    }

    /// Restrict to the given phenomena.
    pub fn filter_phenomena(&self, keep: &[Phenomenon]) -> Self {
        Self {
            n_layers: self.n_layers,
            mode: self.mode,
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.phenomenon))
                .cloned()
                .collect(),
        }
    }

    pub fn phenomena(&self) -> Vec<Phenomenon> {
        let set: BTreeSet<Phenomenon> = self.pairs.iter().map(|p| p.phenomenon).collect();
        set.into_iter().collect()
    }
}

/// Contiguous layer band, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub first: usize,
    pub last: usize,
}

impl Band {
    pub fn layers(self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    pub fn contains(self, layer: usize) -> bool {
        self.layers().contains(&layer)
    }
}

/// Early, mid and late thirds of the network; a band is `None` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bands {
    pub early: Option<Band>,
    pub mid: Option<Band>,
    pub late: Option<Band>,
}

impl Bands {
    /// Layer `l` goes to band `⌊3l / n⌋`; for 12 layers: 0–3, 4–7, 8–11.
    pub fn for_layers(n_layers: usize) -> Self {
        let band = |k: usize| {
            let members: Vec<usize> = (0..n_layers).filter(|&l| l * 3 / n_layers == k).collect();
            Some(Band {
                first: *members.first()?,
                last: *members.last()?,
            })
        };
        Self {
            early: band(0),
            mid: band(1),
            late: band(2),
        }
    }

    pub fn as_array(&self) -> [Option<Band>; 3] {
        [self.early, self.mid, self.late]
    }

    /// Mean of `values` over each band.
    pub fn means(&self, values: &[f64]) -> BandValues {
        let m = |b: Option<Band>| b.map(|b| stats::mean(&values[b.first..=b.last]));
        BandValues {
            early: m(self.early),
            mid: m(self.mid),
            late: m(self.late),
        }
    }

    /// Sum of `values` over each band (0 for an empty band).
    pub fn sums(&self, values: &[f64]) -> [f64; 3] {
        self.as_array()
            .map(|b| b.map_or(0.0, |b| values[b.first..=b.last].iter().sum()))
    }
}

fn per_layer_mean_abs<'a>(n_layers: usize, pairs: impl Iterator<Item = &'a PairEffects>) -> Vec<f64> {
    let mut sums = vec![0.0; n_layers];
    let mut n = 0usize;
    for p in pairs {
        for (s, e) in sums.iter_mut().zip(&p.effects) {
            *s += e.abs();
        }
        n += 1;
    }
    sums.into_iter().map(|s| s / n as f64).collect()
}

/// `sensitivity[L]` = mean over pairs of `|effect(pair, L)|`.
pub fn lexical_sensitivity(t: &EffectTensor) -> Result<Vec<f64>> {
    t.non_empty()?;
    Ok(per_layer_mean_abs(t.n_layers, t.pairs.iter()))
}

/// Mean signed effect per layer.
pub fn signed_sensitivity(t: &EffectTensor) -> Result<Vec<f64>> {
    t.non_empty()?;
    let n = t.pairs.len() as f64;
    Ok((0..t.n_layers)
        .map(|l| t.pairs.iter().map(|p| p.effects[l]).sum::<f64>() / n)
        .collect())
}

/// Per-pair mean `|effect|` over all layers, tested against zero.
pub fn sensitivity_significance(t: &EffectTensor) -> Result<TestResult> {
    t.non_empty()?;
    let per_pair: Vec<f64> = t
        .pairs
        .iter()
        .map(|p| p.effects.iter().map(|e| e.abs()).sum::<f64>() / t.n_layers as f64)
        .collect();
    stats::test_mean(&per_pair, None)
}

/// Per-pair `mean_{L∈layers}|target| − mean_{L∈layers}|control|`.
pub fn specificity_scores(target: &EffectTensor, control: &EffectTensor, layers: Band) -> Result<Vec<f64>> {
    target.non_empty()?;
    if target.pair_ids() != control.pair_ids() || target.n_layers != control.n_layers {
        return Err(Error::Metric(
            "target and control tensors cover different pairs or layers".into(),
        ));
    }
    if layers.last >= target.n_layers || layers.first > layers.last {
        return Err(Error::Metric(format!("band {layers:?} outside the network")));
    }
    let k = (layers.last - layers.first + 1) as f64;
    let band_mean = |p: &PairEffects| p.effects[layers.first..=layers.last].iter().map(|e| e.abs()).sum::<f64>() / k;
    Ok(target
        .pairs
        .iter()
        .zip(&control.pairs)
        .map(|(a, b)| band_mean(a) - band_mean(b))
        .collect())
}

/// Mean specificity with a t-test and a sign-flip permutation test.
pub fn position_specificity(
    target: &EffectTensor,
    control: &EffectTensor,
    layers: Band,
    resamples: usize,
    seed: u64,
) -> Result<TestResult> {
    let scores = specificity_scores(target, control, layers)?;
    stats::test_mean(&scores, Some((resamples, seed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variability {
    pub per_layer: Vec<f64>,
    pub n_words: usize,
    pub min_contexts: usize,
}

/// `variability[L]` = mean over key words of the sample standard deviation,
/// across contexts, of the word's context-averaged `|effect|` at `L`.
pub fn context_independence(t: &EffectTensor, min_contexts: usize) -> Result<Variability> {
    t.non_empty()?;
    let min_contexts = min_contexts.max(2);
    let mut words: BTreeMap<&str, BTreeMap<&str, Vec<&PairEffects>>> = BTreeMap::new();
    for p in &t.pairs {
        words
            .entry(&p.key_word)
            .or_default()
            .entry(&p.context)
            .or_default()
            .push(p);
    }
    if let Some((w, c)) = words.iter().find(|(_, c)| c.len() < min_contexts) {
        return Err(Error::Metric(format!(
            "word `{w}` appears in {} contexts, need at least {min_contexts}",
            c.len()
        )));
    }
    let mut per_layer = vec![0.0; t.n_layers];
    for contexts in words.values() {
        let means: Vec<Vec<f64>> = contexts
            .values()
            .map(|ps| per_layer_mean_abs(t.n_layers, ps.iter().copied()))
            .collect();
        for (l, v) in per_layer.iter_mut().enumerate() {
            let column: Vec<f64> = means.iter().map(|m| m[l]).collect();
            *v += stats::sample_sd(&column);
        }
    }
    let n_words = words.len();
    per_layer.iter_mut().for_each(|v| *v /= n_words as f64);
    Ok(Variability {
        per_layer,
        n_words,
        min_contexts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenomenonPeak {
    pub phenomenon: Phenomenon,
    pub n_pairs: usize,
    pub mean_abs: Vec<f64>,
    pub peak_layer: usize,
    /// Another layer reaches exactly the same mean.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakDistribution {
    pub peaks: Vec<PhenomenonPeak>,
    /// Number of phenomena peaking at each layer.
    pub histogram: Vec<usize>,
}

fn bucket(t: &EffectTensor, ph: Phenomenon) -> Result<Vec<&PairEffects>> {
    let b: Vec<&PairEffects> = t.pairs.iter().filter(|p| p.phenomenon == ph).collect();
    if b.is_empty() {
        return Err(Error::Metric(format!("no pairs for phenomenon {ph}")));
    }
    Ok(b)
}

/// Peak layer (argmax of mean `|effect|`, lower layer on ties) per phenomenon.
pub fn peak_layer_distribution(t: &EffectTensor, phenomena: &[Phenomenon]) -> Result<PeakDistribution> {
    if phenomena.is_empty() {
        return Err(Error::Metric("no phenomena requested".into()));
    }
    let mut histogram = vec![0; t.n_layers];
    let mut peaks = Vec::with_capacity(phenomena.len());
    for &ph in phenomena {
        let b = bucket(t, ph)?;
        let mean_abs = per_layer_mean_abs(t.n_layers, b.iter().copied());
        let mut peak = 0;
        for (l, &v) in mean_abs.iter().enumerate() {
            if v > mean_abs[peak] {
                peak = l;
            }
        }
        let tie = mean_abs
            .iter()
            .enumerate()
            .any(|(l, &v)| l != peak && v == mean_abs[peak]);
        histogram[peak] += 1;
        peaks.push(PhenomenonPeak {
            phenomenon: ph,
            n_pairs: b.len(),
            mean_abs,
            peak_layer: peak,
            tie,
        });
    }
    Ok(PeakDistribution { peaks, histogram })
}

/// Layers ordered by decreasing value, lower layer first on ties; first `k`.
pub fn top_layers(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Top layers per phenomenon, strongest first.
    pub top3: Vec<(Phenomenon, Vec<usize>)>,
    /// Most common top-3 set, ascending; ties go to the smallest set.
    pub modal_set: Vec<usize>,
    pub n_matching: usize,
    pub fraction: f64,
}

/// Most frequent set among `sets` (each sorted), smallest on ties, with its count.
pub fn modal_set(sets: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let mut counts: BTreeMap<&Vec<usize>, usize> = BTreeMap::new();
    for s in sets {
        *counts.entry(s).or_default() += 1;
    }
    let mut best: Option<(&Vec<usize>, usize)> = None;
    for (s, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((s, c));
        }
    }
    best.map_or((Vec::new(), 0), |(s, c)| (s.clone(), c))
}

/// Top-3 layers per phenomenon and the share of phenomena with the modal set.
pub fn top3_convergence(t: &EffectTensor, phenomena: &[Phenomenon]) -> Result<Convergence> {
    let dist = peak_layer_distribution(t, phenomena)?;
    let k = 3.min(t.n_layers);
    let top3: Vec<(Phenomenon, Vec<usize>)> = dist
        .peaks
        .iter()
        .map(|p| (p.phenomenon, top_layers(&p.mean_abs, k)))
        .collect();
    let sets: Vec<Vec<usize>> = top3
        .iter()
        .map(|(_, t)| {
            let mut s = t.clone();
            s.sort_unstable();
            s
        })
        .collect();
    let (modal, n_matching) = modal_set(&sets);
    Ok(Convergence {
        top3,
        modal_set: modal,
        n_matching,
        fraction: n_matching as f64 / sets.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    /// `Σ_pairs |effect|` per layer.
    pub totals: Vec<f64>,
    pub band_totals: [f64; 3],
    /// Band totals over the grand total (early, mid, late).
    pub shares: [f64; 3],
}

pub fn layer_importance(t: &EffectTensor) -> Result<Importance> {
    t.non_empty()?;
    let mut totals = vec![0.0; t.n_layers];
    for p in &t.pairs {
        for (s, e) in totals.iter_mut().zip(&p.effects) {
            *s += e.abs();
        }
    }
    let bands = Bands::for_layers(t.n_layers);
    let band_totals = bands.sums(&totals);
    let grand: f64 = band_totals.iter().sum();
    if grand == 0.0 {
        return Err(Error::Metric("all effects are zero; layer shares undefined".into()));
    }
    Ok(Importance {
        shares: band_totals.map(|b| b / grand),
        totals,
        band_totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: &[(u32, Phenomenon, &str, &str, &[f64])]) -> EffectTensor {
        let n = rows[0].4.len();
        EffectTensor::new(
            n,
            PositionMode::All,
            rows.iter()
                .map(|&(id, ph, w, c, e)| PairEffects {
                    pair_id: id,
                    phenomenon: ph,
                    key_word: w.into(),
                    context: c.into(),
                    score_clean: 0.5,
                    score_patched: e.iter().map(|x| 0.5 + x).collect(),
                    effects: e.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bands_for_twelve_layers() {
        let b = Bands::for_layers(12);
        assert_eq!(b.early, Some(Band { first: 0, last: 3 }));
        assert_eq!(b.mid, Some(Band { first: 4, last: 7 }));
        assert_eq!(b.late, Some(Band { first: 8, last: 11 }));
        let b = Bands::for_layers(2);
        assert_eq!(b.late, None);
    }

    #[test]
    fn three_pair_sensitivity() {
        let t = tensor(&[
            (3, Phenomenon::L1, "a", "x", &[0.1, -0.2]),
            (1, Phenomenon::L1, "a", "y", &[-0.3, 0.0]),
            (2, Phenomenon::L2, "b", "x", &[0.2, 0.4]),
        ]);
        let s = lexical_sensitivity(&t).unwrap();
        assert!((s[0] - 0.2).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15);
        assert_eq!(t.pair_ids(), vec![1, 2, 3]);
    }

    #[test]
    fn zero_effects() {
        let t = tensor(&[
            (1, Phenomenon::C1, "a", "x", &[0.0; 4]),
            (2, Phenomenon::C1, "a", "y", &[0.0; 4]),
            (3, Phenomenon::C1, "a", "z", &[0.0; 4]),
        ]);
        assert_eq!(lexical_sensitivity(&t).unwrap(), vec![0.0; 4]);
        assert_eq!(context_independence(&t, 3).unwrap().per_layer, vec![0.0; 4]);
        assert!(layer_importance(&t).is_err());
        let spec = position_specificity(&t, &t, Band { first: 0, last: 3 }, 100, 0).unwrap();
        assert_eq!((spec.mean, spec.p_value, spec.permutation_p), (0.0, 1.0, Some(1.0)));
    }

    #[test]
    fn uniform_importance() {
        let t = tensor(&[(1, Phenomenon::C1, "a", "x", &[0.1; 12])]);
        let imp = layer_importance(&t).unwrap();
        for s in imp.shares {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn peak_ties_prefer_lower_layer() {
        let t = tensor(&[(1, Phenomenon::C2, "a", "x", &[0.1, 0.3, 0.3, 0.2])]);
        let d = peak_layer_distribution(&t, &[Phenomenon::C2]).unwrap();
        assert_eq!(d.peaks[0].peak_layer, 1);
        assert!(d.peaks[0].tie);
        assert!(peak_layer_distribution(&t, &[Phenomenon::C3]).is_err());
        assert_eq!(top_layers(&[0.1, 0.3, 0.3, 0.2], 3), vec![1, 2, 3]);
    }

    #[test]
    fn sparse_words_are_rejected_or_filtered() {
        let t = tensor(&[
            (1, Phenomenon::L1, "a", "x", &[0.1]),
            (2, Phenomenon::L1, "a", "y", &[0.2]),
            (3, Phenomenon::L1, "a", "z", &[0.3]),
            (4, Phenomenon::L1, "b", "x", &[0.3]),
        ]);
        assert!(context_independence(&t, 3).is_err());
        let (f, dropped) = t.with_min_contexts(3);
        assert_eq!(dropped, vec!["b".to_string()]);
        let v = context_independence(&f, 3).unwrap();
        assert!((v.per_layer[0] - 0.1).abs() < 1e-12);
    }
}
