//! Training objectives over scores, with analytic gradients.
//!
//! Losses take one positive score and the scores of the user's shared
//! negatives. Everything is computed in `f64` in log-space; no raw score is
//! ever exponentiated.
//!
//! BPR and the multinomial losses depend only on score differences, so adding
//! a constant to every score leaves them unchanged. Negative sampling scores
//! each item against a fixed threshold of zero and is not shift invariant.

use rand::Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pairwise ranking, averaged over the negatives.
    Bpr,
    /// Logistic positive-vs-negative classification.
    NegativeSampling,
    /// Softmax cross-entropy with a sampled partition function estimate.
    Css,
    /// Softmax cross-entropy over the full catalog.
    ExactMultinomial,
}

impl LossKind {
    pub fn needs_negatives(self) -> bool {
        self != LossKind::ExactMultinomial
    }
}

/// A loss value with its gradients with respect to the input scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−(1/N) Σ ln σ(s_pos − s_neg)`.
pub fn bpr(s_pos: f64, s_negs: &[f64]) -> LossValue {
    bpr_with_margin(s_pos, s_negs, 0.0)
}

/// `−(1/N) Σ ln σ(s_pos − s_neg − margin)`.
pub fn bpr_with_margin(s_pos: f64, s_negs: &[f64], margin: f64) -> LossValue {
    let n = s_negs.len().max(1) as f64;
    let mut value = 0.0;
    let mut d_pos = 0.0;
    let d_negs = s_negs
        .iter()
        .map(|&s| {
            let x = s + margin - s_pos;
            value += softplus(x);
            let g = sigmoid(x) / n;
            d_pos -= g;
            g
        })
        .collect();
    LossValue { value: value / n, d_pos, d_negs }
}

/// `−ln σ(s_pos) − Σ ln(1 − σ(s_neg))`.
pub fn negative_sampling(s_pos: f64, s_negs: &[f64]) -> LossValue {
    let mut value = softplus(-s_pos);
    let d_negs = s_negs
        .iter()
        .map(|&s| {
            value += softplus(s);
            sigmoid(s)
        })
        .collect();
    LossValue { value, d_pos: -sigmoid(-s_pos), d_negs }
}

/// `−s_pos + ln Ẑ` with `Ẑ = e^{s_pos} + ((I − 1)/N) Σ e^{s_neg}`, an unbiased
/// estimate of the softmax partition function from `N` uniform negatives.
pub fn css_multinomial(s_pos: f64, s_negs: &[f64], n_items: usize) -> Result<LossValue> {
    if n_items < 2 {
        return Err(Error::Config(format!("sampled softmax needs at least 2 items, got {n_items}")));
    }
    if s_negs.is_empty() {
        return Err(Error::Config("sampled softmax needs at least one negative".into()));
    }
    let log_w = ((n_items - 1) as f64 / s_negs.len() as f64).ln();
    let max = s_negs.iter().map(|s| s + log_w).fold(s_pos, f64::max);
    let mut sum = (s_pos - max).exp();
    for &s in s_negs {
        sum += (s + log_w - max).exp();
    }
    let log_z = max + sum.ln();
    Ok(LossValue {
        value: log_z - s_pos,
        d_pos: (s_pos - log_z).exp() - 1.0,
        d_negs: s_negs.iter().map(|s| (s + log_w - log_z).exp()).collect(),
    })
}

/// Full softmax cross-entropy; gradient over every item.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn exact_multinomial(scores: &[f64], pos: usize) -> Result<ExactLoss> {
    if pos >= scores.len() {
        return Err(Error::OutOfRange { index: pos as u64, len: scores.len() as u64 });
    }
    let log_z = log_sum_exp(scores);
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - log_z).exp()).collect();
    grad[pos] -= 1.0;
    Ok(ExactLoss { value: log_z - scores[pos], grad })
}

/// Evaluates one of the sampled losses.
pub fn sampled_loss(kind: LossKind, s_pos: f64, s_negs: &[f64], n_items: usize) -> Result<LossValue> {
    match kind {
        LossKind::Bpr => Ok(bpr(s_pos, s_negs)),
        LossKind::NegativeSampling => Ok(negative_sampling(s_pos, s_negs)),
        LossKind::Css => css_multinomial(s_pos, s_negs, n_items),
        LossKind::ExactMultinomial => Err(Error::Config("exact multinomial needs the full score vector".into())),
    }
}

/// Draws `n` distinct items uniformly from `0..n_items` minus `exclude`.
///
/// Uses rejection while the request is small relative to what is available,
/// and a partial shuffle of the explicit complement otherwise.
pub fn sample_negatives<R: Rng + ?Sized>(
    n_items: usize,
    n: usize,
    exclude: &FxHashSet<u32>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let excluded = exclude.iter().filter(|&&i| (i as usize) < n_items).count();
    let available = n_items - excluded;
    if n > available {
        return Err(Error::InfeasibleSampling { requested: n, available });
    }
    if n * 4 <= available {
        let mut seen = FxHashSet::default();
        seen.reserve(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let c = rng.random_range(0..n_items as u32);
            if !exclude.contains(&c) && seen.insert(c) {
                out.push(c);
            }
        }
        return Ok(out);
    }
    let mut pool: Vec<u32> = (0..n_items as u32).filter(|i| !exclude.contains(i)).collect();
    for k in 0..n {
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
    }
    pool.truncate(n);
    Ok(pool)
}
