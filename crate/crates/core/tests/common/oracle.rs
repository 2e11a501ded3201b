// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force recomputation of every metric over flat effect records.

use std::collections::{BTreeSet, HashMap};

use patchlab::datagen::Phenomenon;
use patchlab::metrics::{
    context_independence, layer_importance, lexical_sensitivity, peak_layer_distribution,
    position_specificity, top3_convergence, Band, EffectTensor, PairEffects,
};
use patchlab::patching::PositionMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL: f64 = 1e-12;

pub fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REL * a.abs().max(b.abs())
}

fn assert_close(a: f64, b: f64, what: &str) {
    assert!(close(a, b), "{what}: {a} vs {b}");
}

/// One flat record per (pair, layer).
struct Record {
    pair: u32,
    phenomenon: Phenomenon,
    word: String,
    context: String,
    layer: usize,
    effect: f64,
}

fn records(t: &EffectTensor) -> Vec<Record> {
    let mut out = Vec::new();
    for p in t.pairs() {
        for (layer, &effect) in p.effects.iter().enumerate() {
            out.push(Record {
                pair: p.pair_id,
                phenomenon: p.phenomenon,
                word: p.key_word.clone(),
                context: p.context.clone(),
                layer,
                effect,
            });
        }
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n_layers: usize, mode: PositionMode, ids: &[u32]) -> EffectTensor {
    let phen = [Phenomenon::C1, Phenomenon::C5, Phenomenon::C8];
    let pairs = ids
        .iter()
        .map(|&id| {
            let effects: Vec<f64> = (0..n_layers).map(|_| rng.gen_range(-1.0..1.0)).collect();
            PairEffects {
                pair_id: id,
                phenomenon: phen[(id as usize) % 3],
                key_word: ["good", "bad"][(id as usize / 3) % 2].into(),
                context: ["a", "b", "c", "d"][(id as usize) % 4].into(),
                score_clean: 0.5,
                score_patched: effects.iter().map(|e| 0.5 + e / 2.0).collect(),
                effects,
            }
        })
        .collect();
    EffectTensor::new(n_layers, mode, pairs).unwrap()
}

// --- independent oracles ---------------------------------------------------

fn oracle_sensitivity(recs: &[Record], n_layers: usize) -> Vec<f64> {
    let mut by_layer: HashMap<usize, Vec<f64>> = HashMap::new();
    for r in recs {
        by_layer.entry(r.layer).or_default().push(r.effect.abs());
    }
    (0..n_layers)
        .map(|l| {
            let v = &by_layer[&l];
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

fn oracle_sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Γ(x) for positive integers and half-integers.
fn gamma_half(x: f64) -> f64 {
    if (x - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else if (x - 1.0).abs() < 1e-12 {
        1.0
    } else {
        (x - 1.0) * gamma_half(x - 1.0)
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let aa = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        for step in [aa, -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))] {
            d = 1.0 + step * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + step / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = x.powf(a) * (1.0 - x).powf(b) * gamma_half(a + b) / (gamma_half(a) * gamma_half(b));
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

pub fn oracle_t_test(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = oracle_sd(v);
    let t = m / (sd / n.sqrt());
    let df = n - 1.0;
    (m, reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)))
}

fn oracle_sign_flip(v: &[f64], resamples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = v.len() as f64;
    let obs = (v.iter().sum::<f64>() / n).abs() * (1.0 - 1e-12);
    let mut hits = 0;
    for _ in 0..resamples {
        let mut s = 0.0;
        for &x in v {
            s += if rng.gen::<bool>() { x } else { -x };
        }
        if (s / n).abs() >= obs {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (resamples + 1) as f64
}

fn oracle_mean_abs_by_phenomenon(recs: &[Record], ph: Phenomenon, n_layers: usize) -> Vec<f64> {
    let sub: Vec<Record> = recs
        .iter()
        .filter(|r| r.phenomenon == ph)
        .map(|r| Record { word: String::new(), context: String::new(), ..*r })
        .collect();
    oracle_sensitivity(&sub, n_layers)
}

fn oracle_argmax(v: &[f64]) -> usize {
    let best = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x == best).unwrap()
}

fn oracle_top3_set(v: &[f64]) -> BTreeSet<usize> {
    let mut rest: Vec<usize> = (0..v.len()).collect();
    let mut out = BTreeSet::new();
    while out.len() < 3.min(v.len()) {
        let (i, _) = rest
            .iter()
            .enumerate()
            .max_by(|a, b| v[*a.1].partial_cmp(&v[*b.1]).unwrap().then(b.1.cmp(a.1)))
            .unwrap();
        out.insert(rest.remove(i));
    }
    out
}

/// Compare every metric on a random tensor pair against the oracles; panics on mismatch.
pub fn check_against_oracle(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = 12;
    let n_pairs = rng.gen_range(2..=5);
    let ids: Vec<u32> = rand::seq::index::sample(&mut rng, 40, n_pairs).into_iter().map(|i| i as u32).collect();
    let target = random_tensor(&mut rng, n_layers, PositionMode::TargetWords, &ids);
    let control = random_tensor(&mut rng, n_layers, PositionMode::ControlWords, &ids);
    let recs = records(&target);
    let crecs = records(&control);

    let sens = lexical_sensitivity(&target).unwrap();
    for (a, b) in sens.iter().zip(oracle_sensitivity(&recs, n_layers)) {
        assert_close(*a, b, "sensitivity");
    }

    // Specificity over layers 0-3.
    let mut per_pair: HashMap<u32, f64> = HashMap::new();
    for r in recs.iter().filter(|r| r.layer < 4) {
        *per_pair.entry(r.pair).or_default() += r.effect.abs() / 4.0;
    }
    for r in crecs.iter().filter(|r| r.layer < 4) {
        *per_pair.entry(r.pair).or_default() -= r.effect.abs() / 4.0;
    }
    let mut keys: Vec<u32> = per_pair.keys().copied().collect();
    keys.sort_unstable();
    let scores: Vec<f64> = keys.iter().map(|k| per_pair[k]).collect();
    let spec = position_specificity(&target, &control, Band { first: 0, last: 3 }, 500, seed).unwrap();
    let (m, p) = oracle_t_test(&scores);
    // Summation order differs from the oracle's, so compare the means to a few ulps.
    assert!((spec.mean - m).abs() <= 1e-12 * scores.iter().map(|s| s.abs()).sum::<f64>().max(1e-300));
    assert_close(spec.p_value, p, "t-test p");
    assert_close(spec.permutation_p.unwrap(), oracle_sign_flip(&scores, 500, seed), "permutation p");

    // Variability: words with at least three contexts.
    let mut groups: HashMap<(String, String), Vec<&Record>> = HashMap::new();
    for r in &recs {
        groups.entry((r.word.clone(), r.context.clone())).or_default().push(r);
    }
    let words: BTreeSet<String> = recs.iter().map(|r| r.word.clone()).collect();
    let kept: Vec<&String> = words
        .iter()
        .filter(|w| groups.keys().filter(|(gw, _)| gw == *w).count() >= 3)
        .collect();
    let (filtered, _) = target.with_min_contexts(3);
    if kept.is_empty() {
        assert!(filtered.is_empty());
    } else {
        let v = context_independence(&filtered, 3).unwrap();
        for l in 0..n_layers {
            let mut acc = 0.0;
            for w in &kept {
                let ctx_means: Vec<f64> = groups
                    .iter()
                    .filter(|((gw, _), _)| gw == *w)
                    .map(|(_, rs)| {
                        let at: Vec<f64> = rs.iter().filter(|r| r.layer == l).map(|r| r.effect.abs()).collect();
                        at.iter().sum::<f64>() / at.len() as f64
                    })
                    .collect();
                acc += oracle_sd(&ctx_means);
            }
            assert_close(v.per_layer[l], acc / kept.len() as f64, "variability");
        }
    }

    // Peaks, top-3 and convergence.
    let phen = target.phenomena();
    let peaks = peak_layer_distribution(&target, &phen).unwrap();
    let conv = top3_convergence(&target, &phen).unwrap();
    let mut sets = Vec::new();
    for (i, &ph) in phen.iter().enumerate() {
        let m = oracle_mean_abs_by_phenomenon(&recs, ph, n_layers);
        for (a, b) in peaks.peaks[i].mean_abs.iter().zip(&m) {
            assert_close(*a, *b, "phenomenon mean");
        }
        assert_eq!(peaks.peaks[i].peak_layer, oracle_argmax(&m));
        let set = oracle_top3_set(&m);
        assert_eq!(conv.top3[i].1.iter().copied().collect::<BTreeSet<_>>(), set);
        sets.push(set);
    }
    let best = sets.iter().map(|s| sets.iter().filter(|t| *t == s).count()).max().unwrap();
    assert_close(conv.fraction, best as f64 / sets.len() as f64, "convergence");

    // Importance.
    let imp = layer_importance(&target).unwrap();
    let mut totals = vec![0.0; n_layers];
    for r in &recs {
        totals[r.layer] += r.effect.abs();
    }
    let grand: f64 = totals.iter().sum();
    for (a, b) in imp.totals.iter().zip(&totals) {
        assert_close(*a, *b, "total");
    }
    for (k, range) in [(0, 0..4), (1, 4..8), (2, 8..12)] {
        let band: f64 = totals[range].iter().sum();
        assert!((imp.shares[k] - band / grand).abs() <= 1e-12, "share");
    }
    assert!((imp.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}
