//! Softmax, forward/reverse KL and their logit-space gradients.
//!
//! All logarithms are natural. Probabilities that enter a logarithm are
//! clamped below at [`PROB_FLOOR`]; terms whose weight is exactly zero are
//! skipped, so `0 · log 0 = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Lower clamp applied to probabilities inside log arguments.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ p = 1` accepted by [`Distribution::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[inline]
pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

/// A probability vector over a vocabulary of size `V ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some((i, &v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!("probability {i} is {v}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Distribution(probs))
    }

    /// Normalizes nonnegative finite weights onto the simplex.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        Distribution::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Distribution::from_weights(vec![1.0; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// A logit representative whose softmax is this distribution
    /// (log-probabilities, clamped at the floor).
    pub fn to_logits(&self) -> LogitVector {
        LogitVector(self.0.iter().map(|&p| clamped_ln(p)).collect())
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l1_distance(&self, other: &Distribution) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Distribution::new(v).map_err(serde::de::Error::custom)
    }
}

/// Pre-softmax scores. All entries finite, length ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::invalid(format!(
                "logit vector needs at least 2 entries, got {}",
                logits.len()
            )));
        }
        if let Some((i, v)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is {v}")));
        }
        Ok(LogitVector(logits))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        LogitVector::new(vec![0.0; len])
    }

    pub fn logits(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// In-place `z ← z − lr · grad`. Fails if the step leaves the finite range.
    pub fn descend(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        check_len(self.0.len(), grad.len())?;
        for (z, g) in self.0.iter_mut().zip(grad) {
            *z -= lr * g;
        }
        if self.0.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("gradient step produced a non-finite logit"));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for LogitVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        LogitVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// Loss value together with its gradient w.r.t. the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceEval {
    pub value: f64,
    pub grad_student_logits: Vec<f64>,
}

impl DivergenceEval {
    /// `a · x + b · y`, applied to both value and gradient.
    pub(crate) fn combine(a: f64, x: &DivergenceEval, b: f64, y: &DivergenceEval) -> Self {
        DivergenceEval {
            value: a * x.value + b * y.value,
            grad_student_logits: x
                .grad_student_logits
                .iter()
                .zip(&y.grad_student_logits)
                .map(|(gx, gy)| a * gx + b * gy)
                .collect(),
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &LogitVector) -> Distribution {
    let logits = z.logits();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    // max-shifting keeps total in [1, V], so the result is on the simplex
    Distribution(exps.into_iter().map(|e| e / total).collect())
}

/// Σ_j w_j · ln(w_j / v_j), skipping zero weights. Shared by FKL and RKL so
/// that `rkl(p, q) == fkl(q, p)` bit for bit.
fn weighted_log_ratio(w: &[f64], v: &[f64]) -> f64 {
    w.iter()
        .zip(v)
        .filter(|(&wi, _)| wi != 0.0)
        .map(|(&wi, &vi)| kl_term(wi, vi))
        .sum()
}

#[inline]
fn kl_term(w: f64, v: f64) -> f64 {
    w * (clamped_ln(w) - clamped_ln(v))
}

/// Forward KL, Σ p ln(p/q).
pub fn fkl(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_len(p.len(), q.len())?;
    Ok(weighted_log_ratio(p.probs(), q.probs()))
}

/// Reverse KL, Σ q ln(q/p).
pub fn rkl(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_len(p.len(), q.len())?;
    Ok(weighted_log_ratio(q.probs(), p.probs()))
}

/// FKL value and `∂FKL/∂z_q = q − p`.
pub fn fkl_grad(p: &Distribution, z_q: &LogitVector) -> Result<DivergenceEval> {
    check_len(p.len(), z_q.len())?;
    let q = softmax(z_q);
    let value = fkl(p, &q)?;
    let grad = q
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(qj, pj)| qj - pj)
        .collect();
    Ok(DivergenceEval {
        value,
        grad_student_logits: grad,
    })
}

/// RKL value and `∂RKL/∂z_q = q · (ln(q/p) − RKL)`.
pub fn rkl_grad(p: &Distribution, z_q: &LogitVector) -> Result<DivergenceEval> {
    check_len(p.len(), z_q.len())?;
    let q = softmax(z_q);
    let value = rkl(p, &q)?;
    let grad = q
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(&qj, &pj)| {
            if qj == 0.0 {
                0.0
            } else {
                qj * (clamped_ln(qj) - clamped_ln(pj) - value)
            }
        })
        .collect();
    Ok(DivergenceEval {
        value,
        grad_student_logits: grad,
    })
}

/// Convex generator `f` of an f-divergence `Σ q f(p/q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FGenerator {
    /// `f(x) = x ln x`, giving forward KL.
    XLogX,
    /// `f(x) = −ln x`, giving reverse KL.
    NegLog,
}

impl FGenerator {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FGenerator::XLogX => {
                if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
            FGenerator::NegLog => -x.ln(),
        }
    }

    /// The perspective term `q · f(p / q)` in a form that stays finite and
    /// applies the same clamp as [`fkl`] / [`rkl`].
    fn perspective(self, p: f64, q: f64) -> f64 {
        match self {
            FGenerator::XLogX if p == 0.0 => 0.0,
            FGenerator::XLogX => kl_term(p, q),
            FGenerator::NegLog if q == 0.0 => 0.0,
            FGenerator::NegLog => kl_term(q, p),
        }
    }
}

impl FromStr for FGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fkl_generator" | "x_log_x" | "fkl" => Ok(FGenerator::XLogX),
            "rkl_generator" | "neg_log" | "rkl" => Ok(FGenerator::NegLog),
            other => Err(Error::invalid(format!(
                "unknown f-divergence generator `{other}`"
            ))),
        }
    }
}

impl fmt::Display for FGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FGenerator::XLogX => "fkl_generator",
            FGenerator::NegLog => "rkl_generator",
        })
    }
}

/// Discrete f-divergence `Σ_j q_j f(p_j / q_j)`.
pub fn f_divergence(p: &Distribution, q: &Distribution, f: FGenerator) -> Result<f64> {
    check_len(p.len(), q.len())?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pj, &qj)| f.perspective(pj, qj))
        .sum())
}
