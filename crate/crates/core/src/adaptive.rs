//! Head/tail split of the teacher distribution and the adaptively weighted
//! FKL/RKL combination built on it.
//!
//! The head is the smallest set of highest-probability teacher tokens whose
//! mass reaches `mu`. Gaps between teacher and student are summed separately
//! over head and tail; the FKL weight is the head share of the total gap.
//! Weights are recomputed at every evaluation but treated as constants when
//! differentiating.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{fkl_grad, rkl_grad, softmax, Distribution, DivergenceEval, LogitVector};
use crate::error::{check_len, Error, Result};

pub const DEFAULT_MU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    mask: Vec<bool>,
    head_mass: f64,
}

impl HeadMask {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn head_mass(&self) -> f64 {
        self.head_mass
    }

    pub fn cardinality(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

pub(crate) fn validate_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::invalid(format!("mu must lie in (0, 1], got {mu}")));
    }
    Ok(())
}

/// Shortest prefix of indices sorted by descending probability (ties by
/// ascending index) whose mass reaches `mu`. If rounding keeps the running
/// sum below `mu`, the full vocabulary is selected.
pub fn solve_head_mask(p: &Distribution, mu: f64) -> Result<HeadMask> {
    validate_mu(mu)?;
    let probs = p.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps ascending index among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));

    let mut mask = vec![false; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        mask[i] = true;
        mass += probs[i];
        if mass >= mu {
            break;
        }
    }
    Ok(HeadMask {
        mask,
        head_mass: mass,
    })
}

/// Pointwise gap between teacher and student probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapFn {
    #[default]
    AbsDiff,
}

impl GapFn {
    pub fn eval(self, p: f64, q: f64) -> f64 {
        match self {
            GapFn::AbsDiff => (p - q).abs(),
        }
    }
}

impl FromStr for GapFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_diff" => Ok(GapFn::AbsDiff),
            other => Err(Error::invalid(format!("unknown gap function `{other}`"))),
        }
    }
}

impl fmt::Display for GapFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GapFn::AbsDiff => "abs_diff",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub g_head: f64,
    pub g_tail: f64,
    pub w_fkl: f64,
    pub w_rkl: f64,
    pub mask: HeadMask,
}

/// Head/tail gaps and the resulting FKL/RKL weights. Falls back to
/// `(0.5, 0.5)` when both gaps vanish.
pub fn compute_gaps(
    p: &Distribution,
    q: &Distribution,
    mask: &HeadMask,
    eps: GapFn,
) -> Result<GapReport> {
    check_len(p.len(), q.len())?;
    check_len(p.len(), mask.len())?;
    let mut g_head = 0.0;
    let mut g_tail = 0.0;
    for ((&pj, &qj), &head) in p.probs().iter().zip(q.probs()).zip(mask.mask()) {
        let gap = eps.eval(pj, qj);
        if head {
            g_head += gap;
        } else {
            g_tail += gap;
        }
    }
    let total = g_head + g_tail;
    let (w_fkl, w_rkl) = if total > 0.0 {
        let w = g_head / total;
        (w, 1.0 - w)
    } else {
        (0.5, 0.5)
    };
    Ok(GapReport {
        g_head,
        g_tail,
        w_fkl,
        w_rkl,
        mask: mask.clone(),
    })
}

fn weighted(p: &Distribution, z_q: &LogitVector, w_fkl: f64, w_rkl: f64) -> Result<DivergenceEval> {
    let f = fkl_grad(p, z_q)?;
    let r = rkl_grad(p, z_q)?;
    Ok(DivergenceEval::combine(w_fkl, &f, w_rkl, &r))
}

/// AKL value and gradient along with the gap report that set its weights.
pub fn akl_report(
    p: &Distribution,
    z_q: &LogitVector,
    mu: f64,
    eps: GapFn,
) -> Result<(DivergenceEval, GapReport)> {
    check_len(p.len(), z_q.len())?;
    let mask = solve_head_mask(p, mu)?;
    let gaps = compute_gaps(p, &softmax(z_q), &mask, eps)?;
    let eval = weighted(p, z_q, gaps.w_fkl, gaps.w_rkl)?;
    Ok((eval, gaps))
}

pub fn akl(p: &Distribution, z_q: &LogitVector, mu: f64, eps: GapFn) -> Result<DivergenceEval> {
    akl_report(p, z_q, mu, eps).map(|(e, _)| e)
}

/// AKL with the two weights swapped.
pub fn akl_r_report(
    p: &Distribution,
    z_q: &LogitVector,
    mu: f64,
    eps: GapFn,
) -> Result<(DivergenceEval, GapReport)> {
    check_len(p.len(), z_q.len())?;
    let mask = solve_head_mask(p, mu)?;
    let gaps = compute_gaps(p, &softmax(z_q), &mask, eps)?;
    let eval = weighted(p, z_q, gaps.w_rkl, gaps.w_fkl)?;
    Ok((eval, gaps))
}

pub fn akl_r(p: &Distribution, z_q: &LogitVector, mu: f64, eps: GapFn) -> Result<DivergenceEval> {
    akl_r_report(p, z_q, mu, eps).map(|(e, _)| e)
}

/// `alpha · FKL + (1 − alpha) · RKL`.
pub fn fixed_mix(p: &Distribution, z_q: &LogitVector, alpha: f64) -> Result<DivergenceEval> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    weighted(p, z_q, alpha, 1.0 - alpha)
}

/// Which loss a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Fkl,
    Rkl,
    FixedMix(f64),
    Akl,
    AklR,
}

impl Divergence {
    /// The five losses compared by the experiments, in canonical order.
    pub const ALL: [Divergence; 5] = [
        Divergence::Fkl,
        Divergence::Rkl,
        Divergence::FixedMix(0.5),
        Divergence::Akl,
        Divergence::AklR,
    ];

    pub fn is_adaptive(self) -> bool {
        matches!(self, Divergence::Akl | Divergence::AklR)
    }

    /// Filesystem-safe form of the tag.
    pub fn file_stem(self) -> String {
        match self {
            Divergence::FixedMix(a) => format!("fixed_mix_{a}"),
            other => other.to_string(),
        }
    }

    pub fn evaluate(
        self,
        p: &Distribution,
        z_q: &LogitVector,
        params: &AdaptiveParams,
    ) -> Result<Evaluation> {
        let (eval, gaps) = match self {
            Divergence::Fkl => (fkl_grad(p, z_q)?, None),
            Divergence::Rkl => (rkl_grad(p, z_q)?, None),
            Divergence::FixedMix(alpha) => (fixed_mix(p, z_q, alpha)?, None),
            Divergence::Akl => {
                let (e, g) = akl_report(p, z_q, params.mu, params.gap)?;
                (e, Some(g))
            }
            Divergence::AklR => {
                let (e, g) = akl_r_report(p, z_q, params.mu, params.gap)?;
                (e, Some(g))
            }
        };
        let weights = gaps.as_ref().map(|g| match self {
            Divergence::AklR => (g.w_rkl, g.w_fkl),
            _ => (g.w_fkl, g.w_rkl),
        });
        Ok(Evaluation {
            eval,
            weights,
            gaps,
        })
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "fkl" => return Ok(Divergence::Fkl),
            "rkl" => return Ok(Divergence::Rkl),
            "akl" => return Ok(Divergence::Akl),
            "akl_r" | "akl-r" => return Ok(Divergence::AklR),
            "fixed_mix" | "fkl+rkl" => return Ok(Divergence::FixedMix(0.5)),
            _ => {}
        }
        let alpha = s
            .strip_prefix("fixed_mix(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("fixed_mix_"))
            .ok_or_else(|| Error::invalid(format!("unknown divergence `{s}`")))?;
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| Error::invalid(format!("bad fixed_mix weight in `{s}`")))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!(
                "fixed_mix weight {alpha} outside [0, 1]"
            )));
        }
        Ok(Divergence::FixedMix(alpha))
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Divergence::Fkl => f.write_str("fkl"),
            Divergence::Rkl => f.write_str("rkl"),
            Divergence::FixedMix(a) => write!(f, "fixed_mix({a})"),
            Divergence::Akl => f.write_str("akl"),
            Divergence::AklR => f.write_str("akl_r"),
        }
    }
}

impl Serialize for Divergence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Divergence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters used by the adaptive losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParams {
    pub mu: f64,
    pub gap: GapFn,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            mu: DEFAULT_MU,
            gap: GapFn::AbsDiff,
        }
    }
}

/// Result of [`Divergence::evaluate`]. `weights` holds the `(w_fkl, w_rkl)`
/// actually applied, for adaptive losses only.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub eval: DivergenceEval,
    pub weights: Option<(f64, f64)>,
    pub gaps: Option<GapReport>,
}
