//! Independent checks for the analytic code paths: central finite
//! differences on the loss value and exhaustive head-mask enumeration.
//!
//! The finite-difference loss is evaluated with its own softmax and KL sums
//! and shares nothing with the analytic gradient code. AKL / AKL-r weights are
//! pinned at their values for the unperturbed logits, matching the analytic
//! gradient, which does not differentiate through the weights.

use crate::adaptive::{compute_gaps, solve_head_mask, validate_mu, AdaptiveParams, Divergence};
use crate::divergence::{softmax, Distribution, LogitVector, PROB_FLOOR};
use crate::error::{check_len, Error, Result};

/// Largest vocabulary [`brute_force_mask`] will enumerate.
pub const BRUTE_FORCE_MAX_V: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdScheme {
    #[default]
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub scheme: FdScheme,
    pub rel_tolerance: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-6,
            scheme: FdScheme::Central,
            rel_tolerance: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

/// The scalar function differentiated by [`finite_diff_grad`]: a divergence
/// against a fixed teacher.
#[derive(Debug, Clone)]
pub struct FdLoss<'a> {
    pub divergence: Divergence,
    pub teacher: &'a Distribution,
    pub params: AdaptiveParams,
}

impl<'a> FdLoss<'a> {
    pub fn new(divergence: Divergence, teacher: &'a Distribution) -> Self {
        FdLoss {
            divergence,
            teacher,
            params: AdaptiveParams::default(),
        }
    }

    pub fn with_params(mut self, params: AdaptiveParams) -> Self {
        self.params = params;
        self
    }

    /// `(w_fkl, w_rkl)` held fixed while perturbing.
    fn pinned_weights(&self, z: &LogitVector) -> Result<(f64, f64)> {
        Ok(match self.divergence {
            Divergence::Fkl => (1.0, 0.0),
            Divergence::Rkl => (0.0, 1.0),
            Divergence::FixedMix(a) => (a, 1.0 - a),
            Divergence::Akl | Divergence::AklR => {
                validate_mu(self.params.mu)?;
                let mask = solve_head_mask(self.teacher, self.params.mu)?;
                let g = compute_gaps(self.teacher, &softmax(z), &mask, self.params.gap)?;
                if self.divergence == Divergence::Akl {
                    (g.w_fkl, g.w_rkl)
                } else {
                    (g.w_rkl, g.w_fkl)
                }
            }
        })
    }
}

/// Neumaier-compensated sum. A central difference divides the loss error by
/// `2 * step`, so plain summation over large vocabularies is too noisy.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `sum a * (ln a - ln b)` over entries with `a != 0`, logs clamped at the
/// probability floor. `!=` rather than `>` so a NaN poisons the sum.
fn plain_kl(a: &[f64], ln_a: &[f64], ln_b: &[f64]) -> f64 {
    let floor = PROB_FLOOR.ln();
    compensated_sum(
        a.iter()
            .zip(ln_a.iter().zip(ln_b))
            .filter(|(&x, _)| x != 0.0)
            .map(|(&x, (&la, &lb))| x * (la.max(floor) - lb.max(floor))),
    )
}

/// Pinned-weight loss at `z`, recomputed from the logits on every call.
/// `ln_p` is the teacher's log-probabilities, which never change.
fn pinned_loss(p: &[f64], ln_p: &[f64], z: &[f64], w_fkl: f64, w_rkl: f64) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|x| x - m).collect();
    let e: Vec<f64> = shifted.iter().map(|a| a.exp()).collect();
    let s = compensated_sum(e.iter().copied());
    // shift and log-normalizer are subtracted separately; folding them into
    // one log-sum-exp adds a rounding error shared by every entry
    let ln_s = s.ln();
    let ln_q: Vec<f64> = shifted.iter().map(|a| a - ln_s).collect();
    let mut loss = 0.0;
    if w_fkl != 0.0 {
        loss += w_fkl * plain_kl(p, ln_p, &ln_q);
    }
    if w_rkl != 0.0 {
        let q: Vec<f64> = e.iter().map(|x| x / s).collect();
        loss += w_rkl * plain_kl(&q, &ln_q, ln_p);
    }
    loss
}

/// Central-difference gradient of `loss` at `z_q`.
pub fn finite_diff_grad(loss: &FdLoss<'_>, z_q: &LogitVector, cfg: &FdConfig) -> Result<Vec<f64>> {
    check_len(loss.teacher.len(), z_q.len())?;
    if !(cfg.step > 0.0) {
        return Err(Error::invalid(format!(
            "step must be positive, got {}",
            cfg.step
        )));
    }
    let (w_fkl, w_rkl) = loss.pinned_weights(z_q)?;
    let p = loss.teacher.probs();
    let ln_p: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let mut z = z_q.logits().to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        let orig = z[j];
        z[j] = orig + cfg.step;
        let up = pinned_loss(p, &ln_p, &z, w_fkl, w_rkl);
        z[j] = orig - cfg.step;
        let down = pinned_loss(p, &ln_p, &z, w_fkl, w_rkl);
        z[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::OracleFailure(format!(
                "{} loss is non-finite when perturbing coordinate {j}",
                loss.divergence
            )));
        }
        grad.push((up - down) / (2.0 * cfg.step));
    }
    Ok(grad)
}

/// Elementwise comparison of an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|a − n| / max(|a|, |n|)` at the worst entry (0 when both are 0).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Entry `j` passes when `|a − n| ≤ max(rel_tolerance · max(|a|, |n|), abs_floor)`.
pub fn check_gradient(analytic: &[f64], numeric: &[f64], cfg: &FdConfig) -> Result<GradCheck> {
    check_len(analytic.len(), numeric.len())?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        passed: true,
    };
    for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > (cfg.rel_tolerance * scale).max(cfg.abs_floor) {
            out.passed = false;
        }
        out.max_abs_error = out.max_abs_error.max(diff);
        if rel > out.max_rel_error && diff > cfg.abs_floor {
            out.max_rel_error = rel;
            out.worst_index = j;
        }
    }
    Ok(out)
}

/// Exhaustive solution set of the minimal head-mask problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOptima {
    pub min_cardinality: usize,
    pub optimal: Vec<Vec<bool>>,
}

impl MaskOptima {
    pub fn contains(&self, mask: &[bool]) -> bool {
        self.optimal.iter().any(|m| m.as_slice() == mask)
    }
}

/// Enumerates all `2^V` masks. A mask is feasible when its mass reaches
/// `mu`; the full mask is always feasible.
pub fn brute_force_mask(p: &Distribution, mu: f64) -> Result<MaskOptima> {
    validate_mu(mu)?;
    let v = p.len();
    if v > BRUTE_FORCE_MAX_V {
        return Err(Error::SizeLimit {
            size: v,
            limit: BRUTE_FORCE_MAX_V,
        });
    }
    let probs = p.probs();
    let full: u32 = (1u32 << v) - 1;
    let mut best = usize::MAX;
    let mut optimal = Vec::new();
    for bits in 0..=full {
        let card = bits.count_ones() as usize;
        if card > best {
            continue;
        }
        let mass: f64 = (0..v)
            .filter(|i| bits >> i & 1 == 1)
            .map(|i| probs[i])
            .sum();
        if mass < mu && bits != full {
            continue;
        }
        if card < best {
            best = card;
            optimal.clear();
        }
        optimal.push((0..v).map(|i| bits >> i & 1 == 1).collect());
    }
    Ok(MaskOptima {
        min_cardinality: best,
        optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::fkl_grad;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fd_vanishes_at_fixed_point() {
        let z = LogitVector::new(vec![0.2, -0.7, 1.1, 0.0, 0.4]).unwrap();
        let p = softmax(&z);
        for d in Divergence::ALL {
            let g = finite_diff_grad(&FdLoss::new(d, &p), &z, &FdConfig::default()).unwrap();
            assert!(g.iter().all(|x| x.abs() < 1e-6), "{d}: {g:?}");
        }
    }

    #[test]
    fn fd_matches_fkl_example() {
        let p = dist(&[0.5, 0.5]);
        let z = LogitVector::new(vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let g =
            finite_diff_grad(&FdLoss::new(Divergence::Fkl, &p), &z, &FdConfig::default()).unwrap();
        assert!((g[0] + 0.25).abs() < 1e-6);
        assert!((g[1] - 0.25).abs() < 1e-6);
        let a = fkl_grad(&p, &z).unwrap();
        assert!(
            check_gradient(&a.grad_student_logits, &g, &FdConfig::default())
                .unwrap()
                .passed
        );
    }

    #[test]
    fn fd_rejects_bad_step() {
        let p = dist(&[0.5, 0.5]);
        let z = LogitVector::zeros(2).unwrap();
        let cfg = FdConfig {
            step: 0.0,
            ..FdConfig::default()
        };
        assert!(finite_diff_grad(&FdLoss::new(Divergence::Fkl, &p), &z, &cfg).is_err());
    }

    #[test]
    fn fd_surfaces_non_finite_loss() {
        let p = dist(&[0.5, 0.5]);
        let z = LogitVector::new(vec![0.0, 1e308]).unwrap();
        let cfg = FdConfig {
            step: 1e308,
            ..FdConfig::default()
        };
        let err = finite_diff_grad(&FdLoss::new(Divergence::Rkl, &p), &z, &cfg).unwrap_err();
        assert!(matches!(err, Error::OracleFailure(_)), "{err}");
    }

    #[test]
    fn check_gradient_flags_mismatch() {
        let cfg = FdConfig::default();
        assert!(
            check_gradient(&[1.0, 1e-10], &[1.0 + 1e-7, 2e-10], &cfg)
                .unwrap()
                .passed
        );
        assert!(!check_gradient(&[1.0], &[1.001], &cfg).unwrap().passed);
        assert!(check_gradient(&[1.0], &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let o = brute_force_mask(&dist(&[0.4, 0.3, 0.2, 0.1]), 0.5).unwrap();
        assert_eq!(o.min_cardinality, 2);
        assert!(o.contains(&[true, true, false, false]));

        let o = brute_force_mask(&dist(&[0.4, 0.3, 0.2, 0.1]), 1.0).unwrap();
        assert_eq!(o.min_cardinality, 4);
        assert_eq!(o.optimal, vec![vec![true; 4]]);

        let o = brute_force_mask(&dist(&[0.25; 4]), 0.5).unwrap();
        assert_eq!(o.min_cardinality, 2);
        assert_eq!(o.optimal.len(), 6);
        let m = solve_head_mask(&dist(&[0.25; 4]), 0.5).unwrap();
        assert!(o.contains(m.mask()));
    }

    #[test]
    fn brute_force_size_limit() {
        let p = Distribution::uniform(21).unwrap();
        assert!(matches!(
            brute_force_mask(&p, 0.5),
            Err(Error::SizeLimit {
                size: 21,
                limit: 20
            })
        ));
    }
}
