// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear sentiment probe on final-layer representations.
//!
//! Logistic regression fit by full-batch gradient descent. Features are
//! standardized with training-split statistics during fitting; the stored
//! weights are mapped back so that prediction takes raw vectors.

use std::fs;
use std::path::Path;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::LabeledSentence;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::Model;
use crate::tokenizer::Tokenizer;

pub const PROBE_FORMAT: &str = "patchlab-probe";
pub const PROBE_FORMAT_VERSION: u32 = 1;
pub const PROBE_MANIFEST: &str = "probe.json";
pub const PROBE_WEIGHTS: &str = "probe.weights.bin";

const MIN_EXAMPLES: usize = 200;
const MIN_CLASS_SHARE: f64 = 0.25;
const DIVERGENCE_RUN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-3,
            patience: 25,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub split_seed: u64,
    pub hyper: ProbeHyper,
    /// Epochs actually run (early stopping may end before `hyper.epochs`).
    pub epochs_run: usize,
    /// Epoch whose weights were kept (lowest validation loss).
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub validation_loss: f64,
    /// Validation accuracy of the same procedure on label-shuffled data, if measured.
    pub shuffled_label_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: ProbeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRep {
    pub vector: Vec<f64>,
    pub positive: bool,
    pub sentence: String,
}

/// Representations with binary labels. Construction checks the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRepSet {
    dim: usize,
    items: Vec<LabeledRep>,
}

impl LabeledRepSet {
    pub fn new(items: Vec<LabeledRep>) -> Result<Self> {
        let dim = items
            .first()
            .map(|r| r.vector.len())
            .ok_or_else(|| Error::Training("empty representation set".into()))?;
        for (i, r) in items.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::Domain(format!(
                    "representation {i} has length {}, expected {dim}",
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("representation {i} is not finite")));
            }
        }
        let n_pos = items.iter().filter(|r| r.positive).count();
        if n_pos == 0 || n_pos == items.len() {
            return Err(Error::Training("only one class present".into()));
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[LabeledRep] {
        &self.items
    }

    pub fn positive_count(&self) -> usize {
        self.items.iter().filter(|r| r.positive).count()
    }

    /// Same vectors with labels permuted by `seed` (class counts preserved).
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<bool> = self.items.iter().map(|r| r.positive).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let items = self
            .items
            .iter()
            .zip(labels)
            .map(|(r, positive)| LabeledRep {
                positive,
                ..r.clone()
            })
            .collect();
        Self {
            dim: self.dim,
            items,
        }
    }
}

/// Last-token final representations of labeled sentences.
pub fn extract_representations(
    model: &Model,
    tokenizer: &Tokenizer,
    sentences: &[LabeledSentence],
    exec: &Executor,
) -> Result<LabeledRepSet> {
    let items = exec.try_map(sentences, |s| {
        let ids = tokenizer.encode(&s.text).ids;
        let rep = model.last_token_representation(&ids)?;
        Ok(LabeledRep {
            vector: rep.iter().map(|&v| f64::from(v)).collect(),
            positive: s.positive,
            sentence: s.text.clone(),
        })
    })?;
    LabeledRepSet::new(items)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean binary cross-entropy plus `l2/2·‖w‖²` and its gradient in `(w, b)`.
///
/// The bias is not penalized.
pub fn logistic_loss_and_grad(
    w: &[f64],
    b: f64,
    xs: &[Vec<f64>],
    ys: &[bool],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(w, x) + b;
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y·z
        loss += softplus(z) - if y { z } else { 0.0 };
        let r = sigmoid(z) - f64::from(u8::from(y));
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    loss += 0.5 * l2 * dot(w, w);
    (loss, gw, gb)
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[&Vec<f64>], dim: usize) -> Self {
        let n = xs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Raw-space weights and bias equivalent to `(w, b)` on standardized input.
    fn fold(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let raw: Vec<f64> = w.iter().zip(&self.std).map(|(wi, s)| wi / s).collect();
        let shift: f64 = raw.iter().zip(&self.mean).map(|(wi, m)| wi * m).sum();
        (raw, b - shift)
    }
}

fn accuracy(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| (dot(w, x) + b >= 0.0) == y)
        .count();
    correct as f64 / xs.len() as f64
}

/// Deterministic stratified split: indices of the training and validation parts.
fn split(data: &LabeledRepSet, seed: u64, validation_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.items[i].positive == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * validation_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train_probe(data: &LabeledRepSet, split_seed: u64, hyper: &ProbeHyper) -> Result<Probe> {
    if data.len() < MIN_EXAMPLES {
        return Err(Error::Training(format!(
            "{} examples, need at least {MIN_EXAMPLES}",
            data.len()
        )));
    }
    let share = data.positive_count() as f64 / data.len() as f64;
    if !(MIN_CLASS_SHARE..=1.0 - MIN_CLASS_SHARE).contains(&share) {
        return Err(Error::Training(format!(
            "positive share {share:.3} outside [{MIN_CLASS_SHARE}, {}]",
            1.0 - MIN_CLASS_SHARE
        )));
    }
    if !(hyper.validation_fraction > 0.0 && hyper.validation_fraction < 1.0) {
        return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
    }
    if !(hyper.learning_rate > 0.0 && hyper.l2 >= 0.0) || hyper.epochs == 0 {
        return Err(Error::Config("invalid probe hyperparameters".into()));
    }

    let (train_idx, val_idx) = split(data, split_seed, hyper.validation_fraction);
    let raw_train: Vec<&Vec<f64>> = train_idx.iter().map(|&i| &data.items[i].vector).collect();
    let std = Standardizer::fit(&raw_train, data.dim);
    let prep = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        idx.iter()
            .map(|&i| (std.apply(&data.items[i].vector), data.items[i].positive))
            .unzip()
    };
    let (xt, yt) = prep(&train_idx);
    let (xv, yv) = prep(&val_idx);

    let mut w = vec![0.0; data.dim];
    let mut b = 0.0;
    let mut best = (f64::INFINITY, w.clone(), b, 0);
    let mut prev_loss = f64::INFINITY;
    let mut rising = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=hyper.epochs {
        let (loss, gw, gb) = logistic_loss_and_grad(&w, b, &xt, &yt, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                consecutive: rising,
            });
        }
        rising = if loss > prev_loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_RUN {
            return Err(Error::Divergence {
                epoch,
                consecutive: rising,
            });
        }
        prev_loss = loss;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= hyper.learning_rate * g;
        }
        b -= hyper.learning_rate * gb;
        epochs_run = epoch;

        let (val_loss, _, _) = logistic_loss_and_grad(&w, b, &xv, &yv, 0.0);
        if val_loss < best.0 - 1e-9 {
            best = (val_loss, w.clone(), b, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }

    let (val_loss, w, b, best_epoch) = best;
    let train_accuracy = accuracy(&w, b, &xt, &yt);
    let validation_accuracy = accuracy(&w, b, &xv, &yv);
    let (weights, bias) = std.fold(&w, b);
    Ok(Probe {
        weights,
        bias,
        meta: ProbeMeta {
            split_seed,
            hyper: hyper.clone(),
            epochs_run,
            best_epoch,
            n_train: train_idx.len(),
            n_validation: val_idx.len(),
            train_accuracy,
            validation_accuracy,
            validation_loss: val_loss,
            shuffled_label_accuracy: None,
        },
    })
}

/// The validation examples `train_probe` held out for this seed and fraction.
pub fn validation_split(data: &LabeledRepSet, split_seed: u64, validation_fraction: f64) -> LabeledRepSet {
    let (_, val) = split(data, split_seed, validation_fraction);
    LabeledRepSet {
        dim: data.dim,
        items: val.into_iter().map(|i| data.items[i].clone()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub accuracy: f64,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl Probe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "vector of length {} for a probe of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    /// Positive-class probability.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }

    pub fn predict_f32(&self, x: ArrayView1<'_, f32>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "vector of length {} for a probe of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let z: f64 = self
            .weights
            .iter()
            .zip(x.iter())
            .map(|(w, &v)| w * f64::from(v))
            .sum();
        Ok(sigmoid(z + self.bias))
    }

    /// Accuracy at the 0.5 threshold plus confusion counts.
    pub fn evaluate(&self, data: &[LabeledRep]) -> Result<ProbeEvaluation> {
        if data.is_empty() {
            return Err(Error::Domain("evaluation set is empty".into()));
        }
        let mut e = ProbeEvaluation {
            accuracy: 0.0,
            true_positive: 0,
            true_negative: 0,
            false_positive: 0,
            false_negative: 0,
        };
        for r in data {
            let predicted = self.predict(&r.vector)? >= 0.5;
            match (predicted, r.positive) {
                (true, true) => e.true_positive += 1,
                (false, false) => e.true_negative += 1,
                (true, false) => e.false_positive += 1,
                (false, true) => e.false_negative += 1,
            }
        }
        e.accuracy = (e.true_positive + e.true_negative) as f64 / data.len() as f64;
        Ok(e)
    }

    /// Write `probe.json` and `probe.weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let manifest = ProbeManifest {
            format: PROBE_FORMAT.into(),
            version: PROBE_FORMAT_VERSION,
            dim: self.dim(),
            dtype: "f64-le".into(),
            weights_file: PROBE_WEIGHTS.into(),
            weights_sha256: hex::encode(Sha256::digest(&bytes)),
            bias: self.bias,
            meta: self.meta.clone(),
        };
        let wpath = dir.join(PROBE_WEIGHTS);
        fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
        let mpath = dir.join(PROBE_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(PROBE_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: ProbeManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: mpath.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.format != PROBE_FORMAT || m.version != PROBE_FORMAT_VERSION || m.dtype != "f64-le" {
            return Err(Error::Integrity(format!(
                "unsupported probe format {} v{} ({})",
                m.format, m.version, m.dtype
            )));
        }
        let wpath = dir.join(&m.weights_file);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if bytes.len() != m.dim * 8 {
            return Err(Error::Integrity(format!(
                "{} has {} bytes, expected {}",
                wpath.display(),
                bytes.len(),
                m.dim * 8
            )));
        }
        if hex::encode(Sha256::digest(&bytes)) != m.weights_sha256 {
            return Err(Error::Integrity(format!("{} checksum mismatch", wpath.display())));
        }
        let weights: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) || !m.bias.is_finite() {
            return Err(Error::Integrity("probe parameters are not finite".into()));
        }
        Ok(Probe {
            weights,
            bias: m.bias,
            meta: m.meta,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeManifest {
    format: String,
    version: u32,
    dim: usize,
    dtype: String,
    weights_file: String,
    weights_sha256: String,
    bias: f64,
    meta: ProbeMeta,
}
