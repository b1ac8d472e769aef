//! Scalar and vector primitives shared by the trainers and the oracles.
//!
//! Everything works in `f64`. Wherever probabilities of whole responses are
//! combined the computation stays in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to [`logistic`] so downstream logs stay finite.
pub const PROB_FLOOR: f64 = 1e-300;
/// Upper clamp applied to [`logistic`].
pub const PROB_CEIL: f64 = 1.0 - 1e-16;

const SIMPLEX_TOL: f64 = 1e-12;

fn finite(z: f64, what: &str) -> Result<f64> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::invalid(format!("{what} must be finite, got {z}")))
    }
}

/// Unchecked, unclamped sigmoid used in hot loops.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Unchecked `log(sigmoid(z)) = -softplus(-z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    // -softplus(-z) = -(max(-z, 0) + ln(1 + exp(-|z|)))
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// The logistic function `1 / (1 + e^{-z})`, clamped into
/// `[PROB_FLOOR, PROB_CEIL]`.
pub fn logistic(z: f64) -> Result<f64> {
    let z = finite(z, "logistic input")?;
    Ok(sigmoid(z).clamp(PROB_FLOOR, PROB_CEIL))
}

/// `log(logistic(z))` without intermediate underflow.
pub fn log_logistic(z: f64) -> Result<f64> {
    let z = finite(z, "log_logistic input")?;
    Ok(log_sigmoid(z))
}

/// Bradley-Terry probability that the response with reward `r_w` is
/// preferred over the one with reward `r_l`.
pub fn bt_probability(r_w: f64, r_l: f64) -> Result<f64> {
    let r_w = finite(r_w, "reward")?;
    let r_l = finite(r_l, "reward")?;
    logistic(r_w - r_l)
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice
/// or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty list"));
    }
    for &z in logits {
        finite(z, "logit")?;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    Ok(out)
}

/// In-place log-softmax; returns the log normalizer that was subtracted.
pub fn log_softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= lse;
    }
    lse
}

/// `KL(p || q)` in nats. Terms with `p = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "support mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if !(pi >= 0.0 && qi >= 0.0) || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::invalid(format!("invalid probability at index {i}")));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// `KL(p || q)` from log-probability tables of equal length.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(Error::invalid(format!(
            "support mismatch: {} vs {}",
            log_p.len(),
            log_q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&lp, &lq)) in log_p.iter().zip(log_q).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Err(Error::InfiniteDivergence { index: i });
        }
        acc += lp.exp() * (lp - lq);
    }
    Ok(acc.max(0.0))
}

/// Sample Pearson correlation of two equally long series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("pearson needs two series of equal length >= 2"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson of a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A point on the probability simplex: one non-negative weight per objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weight vector needs at least one objective"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!("weights must be finite and >= 0, got {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("weights must sum to 1, got {sum}")));
        }
        Ok(WeightVector(weights))
    }

    /// Two-objective weight `(1 - w1, w1)`.
    pub fn pair(w1: f64) -> Result<Self> {
        Self::new(vec![1.0 - w1, w1])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// One reward value per objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w^T r`.
pub fn scalarize(w: &WeightVector, r: &RewardVector) -> Result<f64> {
    scalarize_slice(w.as_slice(), r.as_slice())
}

pub(crate) fn scalarize_slice(w: &[f64], r: &[f64]) -> Result<f64> {
    if w.len() != r.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} weights vs {} rewards",
            w.len(),
            r.len()
        )));
    }
    Ok(w.iter().zip(r).fold(0.0, |acc, (wk, rk)| acc + wk * rk))
}
