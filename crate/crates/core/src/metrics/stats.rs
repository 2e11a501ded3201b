// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small statistics helpers with a fixed summation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Result of testing whether a sample mean differs from zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    /// `None` when infinite (zero spread with a nonzero mean) or unreported.
    pub t_statistic: Option<f64>,
    /// Two-sided one-sample t-test.
    pub p_value: f64,
    /// Two-sided sign-flip permutation test, when run.
    pub permutation_p: Option<f64>,
    pub resamples: Option<usize>,
    pub seed: Option<u64>,
}

/// Two-sided one-sample t-test of `mean(xs) = 0`: `(t, p)`.
pub fn t_test(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Metric(format!("t-test needs at least 2 values, got {}", xs.len())));
    }
    let m = mean(xs);
    let sd = sample_sd(xs);
    if sd == 0.0 {
        return Ok(if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) });
    }
    let df = xs.len() as f64 - 1.0;
    let t = m / (sd / (xs.len() as f64).sqrt());
    // P(|T| ≥ |t|) = I_{df/(df+t²)}(df/2, 1/2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p.clamp(0.0, 1.0)))
}

/// Relative slack when comparing a resampled statistic with the observed one.
pub const PERMUTATION_SLACK: f64 = 1e-12;

/// Two-sided sign-flip permutation p-value for `mean(xs) = 0`.
///
/// Resample `r` draws one `bool` per value, in order, from a ChaCha8 stream
/// seeded with `seed`; `true` keeps the sign. The p-value is
/// `(1 + #{|mean*| ≥ |mean|·(1 − slack)}) / (1 + resamples)`.
pub fn sign_flip_p(xs: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if xs.is_empty() || resamples == 0 {
        return Err(Error::Metric("permutation test needs values and resamples".into()));
    }
    let n = xs.len() as f64;
    let observed = mean(xs).abs() * (1.0 - PERMUTATION_SLACK);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = xs
            .iter()
            .map(|&x| if rng.gen::<bool>() { x } else { -x })
            .sum();
        if (s / n).abs() >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + resamples) as f64)
}

/// t-test plus optional permutation test over `xs`.
pub fn test_mean(xs: &[f64], permutation: Option<(usize, u64)>) -> Result<TestResult> {
    let (t, p) = t_test(xs)?;
    let permutation_p = permutation.map(|(r, s)| sign_flip_p(xs, r, s)).transpose()?;
    Ok(TestResult {
        n: xs.len(),
        mean: mean(xs),
        sd: Some(sample_sd(xs)),
        t_statistic: t.is_finite().then_some(t),
        p_value: p,
        permutation_p,
        resamples: permutation.map(|p| p.0),
        seed: permutation.map(|p| p.1),
    })
}
