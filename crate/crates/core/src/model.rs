// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 forward pass with residual-stream capture.
//!
//! The cache stores the residual stream at every block boundary:
//! `resid[0]` is token + positional embedding and `resid[b]` for `b >= 1` is
//! the output of block `b - 1`. Patching "layer `l`" overwrites boundary
//! `l + 1`, the stream that block `l + 1` (or the final layernorm) reads.
//!
//! All arithmetic is `f32`. Weight matrices are stored input-major
//! (`y = x · W + b`).

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// Nonlinearity used inside the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `0.5·x·(1 + erf(x/√2))`.
    GeluErf,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, the form GPT-2 was trained with.
    GeluTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_context: usize,
    pub layernorm_epsilon: f32,
    pub activation: Activation,
}

impl ModelConfig {
    /// The published 117M-parameter GPT-2 configuration.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_mlp: 3072,
            vocab: 50_257,
            max_context: 1024,
            layernorm_epsilon: 1e-5,
            activation: Activation::GeluTanh,
        }
    }

    /// Shape of the checked-in random-weight fixture.
    pub fn tiny_fixture() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_mlp: 256,
            vocab: 50_257,
            max_context: 128,
            layernorm_epsilon: 1e-5,
            activation: Activation::GeluTanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab == 0 || self.max_context == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_mlp != 4 * self.d_model {
            return Err(Error::Config(format!(
                "d_mlp {} != 4 × d_model {}",
                self.d_mlp, self.d_model
            )));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return Err(Error::Config("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Every tensor name the archive must contain, with its expected shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.d_model, self.d_mlp);
        let mut out = vec![
            ("embed.token".to_string(), vec![self.vocab, d]),
            ("embed.position".to_string(), vec![self.max_context, d]),
        ];
        for i in 0..self.n_layers {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.scale"), vec![d]));
            out.push((format!("{p}.ln1.bias"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("{p}.ln2.scale"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
            out.push((format!("{p}.mlp.in.weight"), vec![d, m]));
            out.push((format!("{p}.mlp.in.bias"), vec![m]));
            out.push((format!("{p}.mlp.out.weight"), vec![m, d]));
            out.push((format!("{p}.mlp.out.bias"), vec![d]));
        }
        out.push(("final_ln.scale".to_string(), vec![d]));
        out.push(("final_ln.bias".to_string(), vec![d]));
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Array1<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `in × out`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    /// `vocab × d_model`; also the (tied) unembedding.
    pub token_embedding: Array2<f32>,
    /// `max_context × d_model`.
    pub position_embedding: Array2<f32>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

/// Residual stream of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    /// `n_layers + 1` entries, each `seq_len × d_model`.
    pub resid: Vec<Array2<f32>>,
    /// `seq_len × d_model`, after the final layernorm.
    pub final_post_ln: Array2<f32>,
}

impl ResidualCache {
    pub fn seq_len(&self) -> usize {
        self.final_post_ln.nrows()
    }

    /// Final-layer representation at `position` (the probe's input).
    pub fn final_representation(&self, position: usize) -> Result<ArrayView1<'_, f32>> {
        if position >= self.seq_len() {
            return Err(Error::Domain(format!(
                "position {position} out of range for sequence of length {}",
                self.seq_len()
            )));
        }
        Ok(self.final_post_ln.row(position))
    }

    pub fn last_representation(&self) -> ArrayView1<'_, f32> {
        self.final_post_ln.row(self.seq_len() - 1)
    }
}

/// Immutable model: config plus weights. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

fn take_tensor(
    archive: &mut TensorArchive,
    name: &str,
    expected: &[usize],
) -> Result<Vec<f32>> {
    let t = archive
        .tensors
        .remove(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape != expected {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: t.shape,
        });
    }
    if let Some(bad) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Integrity(format!(
            "tensor `{name}` has non-finite value at flat index {bad}"
        )));
    }
    Ok(t.data)
}

impl ModelWeights {
    /// Build from an archive, checking every expected tensor. Extra tensors are ignored.
    pub fn from_archive(mut archive: TensorArchive, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        // Check presence and shape of everything up front so the first error is
        // reported in canonical order.
        for (name, shape) in config.expected_tensors() {
            match archive.tensors.get(&name) {
                None => return Err(Error::MissingTensor(name)),
                Some(t) if t.shape != shape => {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: shape,
                        actual: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        let (d, m) = (config.d_model, config.d_mlp);
        let mut mat = |name: &str, r: usize, c: usize| -> Result<Array2<f32>> {
            let data = take_tensor(&mut archive, name, &[r, c])?;
            Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
        };
        let token_embedding = mat("embed.token", config.vocab, d)?;
        let position_embedding = mat("embed.position", config.max_context, d)?;
        let vec_of = |archive: &mut TensorArchive, name: &str, n: usize| -> Result<Array1<f32>> {
            Ok(Array1::from(take_tensor(archive, name, &[n])?))
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            let lin = |archive: &mut TensorArchive, name: &str, r: usize, c: usize| -> Result<Linear> {
                let w = take_tensor(archive, &format!("{p}.{name}.weight"), &[r, c])?;
                let b = take_tensor(archive, &format!("{p}.{name}.bias"), &[c])?;
                Ok(Linear {
                    weight: Array2::from_shape_vec((r, c), w).expect("shape checked"),
                    bias: Array1::from(b),
                })
            };
            let q = lin(&mut archive, "attn.q", d, d)?;
            let k = lin(&mut archive, "attn.k", d, d)?;
            let v = lin(&mut archive, "attn.v", d, d)?;
            let o = lin(&mut archive, "attn.o", d, d)?;
            let mlp_in = lin(&mut archive, "mlp.in", d, m)?;
            let mlp_out = lin(&mut archive, "mlp.out", m, d)?;
            let ln1 = LayerNorm {
                scale: vec_of(&mut archive, &format!("{p}.ln1.scale"), d)?,
                bias: vec_of(&mut archive, &format!("{p}.ln1.bias"), d)?,
            };
            let ln2 = LayerNorm {
                scale: vec_of(&mut archive, &format!("{p}.ln2.scale"), d)?,
                bias: vec_of(&mut archive, &format!("{p}.ln2.bias"), d)?,
            };
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                mlp_in,
                mlp_out,
            });
        }
        let final_ln = LayerNorm {
            scale: vec_of(&mut archive, "final_ln.scale", d)?,
            bias: vec_of(&mut archive, "final_ln.bias", d)?,
        };
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_ln,
        })
    }

    /// Flatten back into an archive using the canonical tensor names.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::default();
        let put2 = |a: &mut TensorArchive, name: String, t: &Array2<f32>| {
            a.insert(name, t.shape().to_vec(), t.iter().copied().collect());
        };
        put2(&mut a, "embed.token".into(), &self.token_embedding);
        put2(&mut a, "embed.position".into(), &self.position_embedding);
        let put1 = |a: &mut TensorArchive, name: String, t: &Array1<f32>| {
            a.insert(name, vec![t.len()], t.to_vec());
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            put1(&mut a, format!("{p}.ln1.scale"), &b.ln1.scale);
            put1(&mut a, format!("{p}.ln1.bias"), &b.ln1.bias);
            put1(&mut a, format!("{p}.ln2.scale"), &b.ln2.scale);
            put1(&mut a, format!("{p}.ln2.bias"), &b.ln2.bias);
            for (name, lin) in [
                ("attn.q", &b.q),
                ("attn.k", &b.k),
                ("attn.v", &b.v),
                ("attn.o", &b.o),
                ("mlp.in", &b.mlp_in),
                ("mlp.out", &b.mlp_out),
            ] {
                put2(&mut a, format!("{p}.{name}.weight"), &lin.weight);
                put1(&mut a, format!("{p}.{name}.bias"), &lin.bias);
            }
        }
        put1(&mut a, "final_ln.scale".into(), &self.final_ln.scale);
        put1(&mut a, "final_ln.bias".into(), &self.final_ln.bias);
        a
    }

    /// Seeded random weights in roughly GPT-2's initialization scale.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (config.d_model, config.d_mlp);
        let mut normal = |r: usize, c: usize, std: f32| {
            Array2::from_shape_fn((r, c), |_| { let z: f32 = StandardNormal.sample(&mut rng); z * std })
        };
        let token_embedding = normal(config.vocab, d, 0.02);
        let position_embedding = normal(config.max_context, d, 0.01);
        let resid_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let mut blocks = Vec::new();
        for _ in 0..config.n_layers {
            let mut lin = |r: usize, c: usize, std: f32| Linear {
                weight: normal(r, c, std),
                bias: normal(1, c, 0.01).into_shape_with_order(c).expect("1×c"),
            };
            let (q, k, v) = (lin(d, d, 0.02), lin(d, d, 0.02), lin(d, d, 0.02));
            let o = lin(d, d, resid_std);
            let mlp_in = lin(d, m, 0.02);
            let mlp_out = lin(m, d, resid_std);
            let mut ln = || LayerNorm {
                scale: normal(1, d, 0.1).into_shape_with_order(d).expect("1×d") + 1.0,
                bias: normal(1, d, 0.02).into_shape_with_order(d).expect("1×d"),
            };
            let (ln1, ln2) = (ln(), ln());
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                mlp_in,
                mlp_out,
            });
        }
        let final_ln = LayerNorm {
            scale: normal(1, d, 0.1).into_shape_with_order(d).expect("1×d") + 1.0,
            bias: normal(1, d, 0.02).into_shape_with_order(d).expect("1×d"),
        };
        Self {
            token_embedding,
            position_embedding,
            blocks,
            final_ln,
        }
    }
}

/// Normalize each row to zero mean and unit variance, without scale or bias.
pub fn normalize_rows(x: &Array2<f32>, eps: f32) -> Array2<f32> {
    let mut out = x.clone();
    let d = x.ncols() as f32;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn layer_norm(x: &Array2<f32>, ln: &LayerNorm, eps: f32) -> Array2<f32> {
    let mut out = normalize_rows(x, eps);
    out *= &ln.scale;
    out += &ln.bias;
    out
}

fn gelu(x: f32, kind: Activation) -> f32 {
    match kind {
        Activation::GeluTanh => {
            const C: f32 = 0.797_884_6; // sqrt(2/pi)
            0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
        }
        Activation::GeluErf => {
            let xd = f64::from(x);
            (0.5 * xd * (1.0 + statrs::function::erf::erf(xd / std::f64::consts::SQRT_2))) as f32
        }
    }
}

fn softmax_row_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if weights.blocks.len() != config.n_layers {
            return Err(Error::Config(format!(
                "weights have {} blocks, config says {}",
                weights.blocks.len(),
                config.n_layers
            )));
        }
        Ok(Self { config, weights })
    }

    /// Load weights from a tensor archive and check them against `config`.
    pub fn load(archive: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let archive = TensorArchive::read(archive)?;
        let weights = ModelWeights::from_archive(archive, &config)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Domain("empty token sequence".into()));
        }
        if len > self.config.max_context {
            return Err(Error::Length {
                len,
                max: self.config.max_context,
            });
        }
        Ok(())
    }

    pub fn embed(&self, ids: &[u32]) -> Result<Array2<f32>> {
        self.check_len(ids.len())?;
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab {
                return Err(Error::Domain(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.config.vocab
                )));
            }
            let mut row = x.row_mut(p);
            row.assign(&self.weights.token_embedding.row(id as usize));
            row += &self.weights.position_embedding.row(p);
        }
        Ok(x)
    }

    fn attention(&self, block: &Block, h: &Array2<f32>) -> Array2<f32> {
        let (n, dh) = (h.nrows(), self.config.d_head);
        let q = block.q.apply(h);
        let k = block.k.apply(h);
        let v = block.v.apply(h);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut merged = Array2::<f32>::zeros((n, self.config.d_model));
        for head in 0..self.config.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut scores = qh.dot(&kh.t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                softmax_row_inplace(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            merged.slice_mut(cols).assign(&scores.dot(&vh));
        }
        block.o.apply(&merged)
    }

    fn mlp(&self, block: &Block, h: &Array2<f32>) -> Array2<f32> {
        let act = self.config.activation;
        let mut hidden = block.mlp_in.apply(h);
        hidden.mapv_inplace(|x| gelu(x, act));
        block.mlp_out.apply(&hidden)
    }

    /// Attention and MLP contributions of block `layer` for input stream `x`.
    pub fn block_components(
        &self,
        layer: usize,
        x: &Array2<f32>,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        let block = self.block(layer)?;
        let eps = self.config.layernorm_epsilon;
        let attn = self.attention(block, &layer_norm(x, &block.ln1, eps));
        let mid = x + &attn;
        let mlp = self.mlp(block, &layer_norm(&mid, &block.ln2, eps));
        Ok((attn, mlp))
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        self.weights.blocks.get(layer).ok_or_else(|| {
            Error::Domain(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            ))
        })
    }

    fn apply_block(&self, block: &Block, x: &Array2<f32>) -> Array2<f32> {
        let eps = self.config.layernorm_epsilon;
        let mut out = x + &self.attention(block, &layer_norm(x, &block.ln1, eps));
        let mlp = self.mlp(block, &layer_norm(&out, &block.ln2, eps));
        out += &mlp;
        out
    }

    pub fn final_norm(&self, x: &Array2<f32>) -> Array2<f32> {
        layer_norm(x, &self.weights.final_ln, self.config.layernorm_epsilon)
    }

    /// Tied unembedding of post-layernorm vectors.
    pub fn unembed(&self, final_post_ln: &Array2<f32>) -> Array2<f32> {
        final_post_ln.dot(&self.weights.token_embedding.t())
    }

    /// Residual cache for a full forward pass, without the vocabulary projection.
    pub fn run_cache(&self, ids: &[u32]) -> Result<ResidualCache> {
        let x = self.embed(ids)?;
        Ok(self.continue_from(vec![x]))
    }

    /// Finish a forward pass from a partially filled residual list. The last
    /// entry of `resid` is the stream entering the next block to run.
    pub(crate) fn continue_from(&self, mut resid: Vec<Array2<f32>>) -> ResidualCache {
        debug_assert!(!resid.is_empty() && resid.len() <= self.config.n_layers + 1);
        for layer in resid.len() - 1..self.config.n_layers {
            let next = self.apply_block(&self.weights.blocks[layer], resid.last().expect("non-empty"));
            resid.push(next);
        }
        let final_post_ln = self.final_norm(resid.last().expect("non-empty"));
        ResidualCache {
            resid,
            final_post_ln,
        }
    }

    /// Logits (`seq_len × vocab`) and the residual cache.
    pub fn forward(&self, ids: &[u32]) -> Result<(Array2<f32>, ResidualCache)> {
        let cache = self.run_cache(ids)?;
        let logits = self.unembed(&cache.final_post_ln);
        Ok((logits, cache))
    }

    /// Rows of the final-layernorm stream, convenient for batched probe features.
    pub fn last_token_representation(&self, ids: &[u32]) -> Result<Array1<f32>> {
        let cache = self.run_cache(ids)?;
        Ok(cache.last_representation().to_owned())
    }
}

/// Max absolute elementwise difference between two equally shaped matrices.
pub fn max_abs_diff(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Row means, used by numerical checks.
pub fn row_means(x: &Array2<f32>) -> Array1<f32> {
    x.mean_axis(Axis(1)).expect("non-empty rows")
}
