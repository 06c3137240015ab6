//! Single-distribution distillation: a free student logit vector is fitted to
//! a fixed teacher by full-batch gradient descent, with per-epoch head/tail
//! error tracking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{solve_head_mask, validate_mu, AdaptiveParams, Divergence, GapFn, HeadMask};
use crate::divergence::{softmax, Distribution, LogitVector};
use crate::error::{check_len, Error, Result};

const SUITE_TOML: &str = include_str!("../configs/teacher_suite.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub center: f64,
    pub width: f64,
    pub weight: f64,
}

/// How a toy teacher distribution is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSpec {
    /// Gaussian mixture evaluated at bin centers `j / (bins − 1)` and normalized.
    GaussianMixtureBins {
        bins: usize,
        components: Vec<MixtureComponent>,
    },
    Explicit {
        probs: Vec<f64>,
    },
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TeacherSpec::GaussianMixtureBins { bins, components } => {
                if *bins < 2 {
                    return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
                }
                if components.is_empty() {
                    return Err(Error::invalid("mixture has no components"));
                }
                for c in components {
                    if !(c.weight > 0.0) || !c.weight.is_finite() {
                        return Err(Error::invalid(format!("component weight {}", c.weight)));
                    }
                    if !(c.width > 0.0) || !c.width.is_finite() {
                        return Err(Error::invalid(format!("component width {}", c.width)));
                    }
                    if !c.center.is_finite() {
                        return Err(Error::invalid("component center is not finite"));
                    }
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("mixture weights sum to {total}")));
                }
                Ok(())
            }
            TeacherSpec::Explicit { probs } => Distribution::new(probs.clone()).map(|_| ()),
        }
    }

    pub fn bins(&self) -> usize {
        match self {
            TeacherSpec::GaussianMixtureBins { bins, .. } => *bins,
            TeacherSpec::Explicit { probs } => probs.len(),
        }
    }
}

pub fn build_teacher(spec: &TeacherSpec) -> Result<Distribution> {
    spec.validate()?;
    match spec {
        TeacherSpec::GaussianMixtureBins { bins, components } => {
            let denom = (*bins - 1) as f64;
            let density: Vec<f64> = (0..*bins)
                .map(|j| {
                    let x = j as f64 / denom;
                    components
                        .iter()
                        .map(|c| {
                            let d = x - c.center;
                            c.weight * (-d * d / (2.0 * c.width * c.width)).exp()
                        })
                        .sum()
                })
                .collect();
            Distribution::from_weights(density)
        }
        TeacherSpec::Explicit { probs } => Distribution::new(probs.clone()),
    }
}

/// A named member of the shipped teacher suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTeacher {
    pub name: String,
    /// Has more than one peak; used by the head/tail ordering experiment.
    #[serde(default)]
    pub multi_peak: bool,
    #[serde(flatten)]
    pub spec: TeacherSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSuite {
    pub version: u32,
    #[serde(rename = "teacher")]
    pub teachers: Vec<NamedTeacher>,
}

impl TeacherSuite {
    /// The suite compiled in from `configs/teacher_suite.toml`.
    pub fn canonical() -> Self {
        Self::from_toml(SUITE_TOML).expect("shipped teacher suite parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let suite: TeacherSuite = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for t in &suite.teachers {
            t.spec.validate()?;
        }
        Ok(suite)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTeacher> {
        self.teachers.iter().find(|t| t.name == name)
    }

    pub fn multi_peak(&self) -> impl Iterator<Item = &NamedTeacher> {
        self.teachers.iter().filter(|t| t.multi_peak)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudentInit {
    /// All-zero logits.
    #[default]
    Uniform,
    /// I.i.d. `N(0, sigma²)` logits drawn from a ChaCha8 stream seeded by `seed`.
    RandomNormal {
        sigma: f64,
    },
    Explicit {
        logits: Vec<f64>,
    },
}

pub fn init_student(bins: usize, seed: u64, init: &StudentInit) -> Result<LogitVector> {
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    match init {
        StudentInit::Uniform => LogitVector::zeros(bins),
        StudentInit::RandomNormal { sigma } => {
            if !(*sigma >= 0.0) {
                return Err(Error::invalid(format!(
                    "sigma must be non-negative, got {sigma}"
                )));
            }
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| Error::invalid(format!("sigma {sigma}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            LogitVector::new((0..bins).map(|_| normal.sample(&mut rng)).collect())
        }
        StudentInit::Explicit { logits } => {
            check_len(bins, logits.len())?;
            LogitVector::new(logits.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub divergence: Divergence,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mu: f64,
    pub gap: GapFn,
    pub seed: u64,
    pub init: StudentInit,
    pub snapshot_epochs: Vec<usize>,
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            divergence: Divergence::Fkl,
            epochs: 2000,
            learning_rate: 0.5,
            mu: crate::adaptive::DEFAULT_MU,
            gap: GapFn::AbsDiff,
            seed: 0,
            init: StudentInit::Uniform,
            snapshot_epochs: Vec::new(),
            convergence_tol: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::invalid(format!(
                "convergence tolerance {}",
                self.convergence_tol
            )));
        }
        validate_mu(self.mu)?;
        if let Some(s) = self.snapshot_epochs.iter().find(|&&s| s > self.epochs) {
            return Err(Error::invalid(format!(
                "snapshot epoch {s} exceeds {} epochs",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> AdaptiveParams {
        AdaptiveParams {
            mu: self.mu,
            gap: self.gap,
        }
    }

    pub fn with_divergence(&self, divergence: Divergence) -> Self {
        TrainConfig {
            divergence,
            ..self.clone()
        }
    }
}

/// Metrics for one epoch. `weights` is set for adaptive losses only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub head_error: f64,
    pub tail_error: f64,
    pub max_abs_error: f64,
    pub weights: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<(usize, Distribution)>,
    pub converged_at: Option<usize>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn at(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn snapshot(&self, epoch: usize) -> Option<&Distribution> {
        self.snapshots
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, d)| d)
    }
}

/// Head/tail split of `Σ |p − q|` under a teacher mask, plus `max |p − q|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSplit {
    pub head: f64,
    pub tail: f64,
    pub max_abs: f64,
}

pub fn error_split(p: &Distribution, q: &Distribution, mask: &HeadMask) -> ErrorSplit {
    let mut out = ErrorSplit {
        head: 0.0,
        tail: 0.0,
        max_abs: 0.0,
    };
    for ((pj, qj), &head) in p.probs().iter().zip(q.probs()).zip(mask.mask()) {
        let d = (pj - qj).abs();
        if head {
            out.head += d;
        } else {
            out.tail += d;
        }
        out.max_abs = out.max_abs.max(d);
    }
    out
}

pub(crate) fn check_finite(epoch: usize, value: f64, grad: &[f64]) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical {
            epoch,
            message: format!("loss is {value}"),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            epoch,
            message: format!("gradient entry {i} is {}", grad[i]),
        });
    }
    Ok(())
}

/// Runs `cfg.epochs` steps of `z ← z − lr · ∇z`. Epoch 0 records the initial
/// state, so the trace holds `epochs + 1` records.
pub fn train(
    teacher: &Distribution,
    student0: &LogitVector,
    cfg: &TrainConfig,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    check_len(teacher.len(), student0.len())?;
    let params = cfg.params();
    let mask = solve_head_mask(teacher, cfg.mu)?;
    let mut z = student0.clone();
    let mut trace = TrainingTrace::default();

    for epoch in 0..=cfg.epochs {
        let q = softmax(&z);
        let ev = cfg.divergence.evaluate(teacher, &z, &params)?;
        check_finite(epoch, ev.eval.value, &ev.eval.grad_student_logits)?;
        let split = error_split(teacher, &q, &mask);
        trace.records.push(EpochRecord {
            epoch,
            loss: ev.eval.value,
            head_error: split.head,
            tail_error: split.tail,
            max_abs_error: split.max_abs,
            weights: ev.weights,
        });
        if trace.converged_at.is_none() && split.max_abs < cfg.convergence_tol {
            trace.converged_at = Some(epoch);
        }
        if cfg.snapshot_epochs.contains(&epoch) {
            trace.snapshots.push((epoch, q));
        }
        if epoch < cfg.epochs {
            z.descend(&ev.eval.grad_student_logits, cfg.learning_rate)
                .map_err(|e| Error::Numerical {
                    epoch,
                    message: e.to_string(),
                })?;
        }
    }
    Ok(trace)
}

/// Traces for several losses trained from one shared initial student.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub student0: LogitVector,
    pub runs: Vec<(Divergence, TrainingTrace)>,
}

impl Comparison {
    pub fn trace(&self, divergence: Divergence) -> Option<&TrainingTrace> {
        self.runs
            .iter()
            .find(|(d, _)| *d == divergence)
            .map(|(_, t)| t)
    }
}

/// Trains every divergence in `divergences` from `init_student(V, seed,
/// cfg_base.init)`. Runs execute in parallel; output order follows the input.
pub fn compare_divergences_with(
    teacher: &Distribution,
    seed: u64,
    cfg_base: &TrainConfig,
    divergences: &[Divergence],
) -> Result<Comparison> {
    cfg_base.validate()?;
    let student0 = init_student(teacher.len(), seed, &cfg_base.init)?;
    let runs = divergences
        .par_iter()
        .map(|&d| {
            let cfg = TrainConfig {
                seed,
                ..cfg_base.with_divergence(d)
            };
            train(teacher, &student0, &cfg).map(|t| (d, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { student0, runs })
}

/// [`compare_divergences_with`] over FKL, RKL, 0.5·FKL + 0.5·RKL, AKL and AKL-r.
pub fn compare_divergences(
    teacher: &Distribution,
    seed: u64,
    cfg_base: &TrainConfig,
) -> Result<Comparison> {
    compare_divergences_with(teacher, seed, cfg_base, &Divergence::ALL)
}
