//! Numerically stable vector kernels shared by the rest of the crate.
//!
//! Everything here is `f64` and pure. Kernels take plain slices so callers can
//! hand over network activations without copying; [`RealVector`] is the
//! validated owned form used at API boundaries.

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{check_dim, Error, Result};

/// Added to the norm product in [`cosine_similarity`]; a zero vector yields 0.
pub const COSINE_EPS: f64 = 1e-12;

/// An owned vector whose entries are all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RealVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Softmax / energy temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Argument(format!("temperature must be positive, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// `log Σ exp(v_i / t)` with the max subtracted before exponentiation.
pub fn logsumexp(v: &[f64], t: Temperature) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Dimension { expected: 1, got: 0 });
    }
    let t = t.value();
    let max = v.iter().map(|x| x / t).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x / t - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax(v: &[f64], t: Temperature) -> Result<Vec<f64>> {
    let lse = logsumexp(v, t)?;
    Ok(v.iter().map(|x| (x / t.value() - lse).exp()).collect())
}

pub fn log_softmax(v: &[f64], t: Temperature) -> Result<Vec<f64>> {
    let lse = logsumexp(v, t)?;
    Ok(v.iter().map(|x| x / t.value() - lse).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `(a·b) / (‖a‖‖b‖ + ε)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let denom = norm(a) * norm(b) + COSINE_EPS;
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradient with respect to `a`
/// (`b` held constant).
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    let ab = dot(a, b);
    let denom = na * nb + COSINE_EPS;
    let raw = ab / denom;
    let value = raw.clamp(-1.0, 1.0);
    if raw != value {
        return Ok((value, vec![0.0; a.len()]));
    }
    // d/da [ab / (|a||b| + eps)] = b/denom - ab * |b| * (a/|a|) / denom^2
    let radial = if na > 0.0 { ab * nb / (na * denom * denom) } else { 0.0 };
    let grad = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / denom - radial * ai)
        .collect();
    Ok((value, grad))
}
