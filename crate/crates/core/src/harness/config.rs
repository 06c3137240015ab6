//! Experiment configuration: a TOML file, per-experiment defaults, and
//! command-line overrides (flags win over the file, the file wins over
//! defaults).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptive::{validate_mu, Divergence, GapFn, DEFAULT_MU};
use crate::error::{Error, Result};
use crate::harness::emit::OutputFormat;
use crate::toy::{build_teacher, StudentInit, TeacherSpec, TeacherSuite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Converge,
    HeadTail,
    Compare,
    Sequence,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Converge => "converge",
            Experiment::HeadTail => "head_tail",
            Experiment::Compare => "compare",
            Experiment::Sequence => "sequence",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converge" => Ok(Experiment::Converge),
            "head_tail" | "head-tail" => Ok(Experiment::HeadTail),
            "compare" => Ok(Experiment::Compare),
            "sequence" => Ok(Experiment::Sequence),
            other => Err(Error::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

/// Settings for the tabular sequence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSettings {
    /// Teacher model file; when absent a random teacher is generated.
    pub teacher_model: Option<PathBuf>,
    pub vocab: usize,
    pub order: usize,
    pub teacher_seed: u64,
    pub teacher_scale: f64,
    /// Std-dev of the random student table (seeded by the run seed).
    pub student_scale: f64,
    pub corpus_size: usize,
    pub sequence_len: usize,
}

impl Default for SequenceSettings {
    fn default() -> Self {
        SequenceSettings {
            teacher_model: None,
            vocab: 4,
            order: 1,
            teacher_seed: 7,
            teacher_scale: 2.0,
            student_scale: 1.0,
            corpus_size: 32,
            sequence_len: 16,
        }
    }
}

/// Where the toy teacher comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeacherChoice {
    /// A member of the shipped suite, by name.
    Named(String),
    Spec(TeacherSpec),
}

impl TeacherChoice {
    pub fn resolve(&self) -> Result<TeacherSpec> {
        match self {
            TeacherChoice::Spec(s) => Ok(s.clone()),
            TeacherChoice::Named(name) => TeacherSuite::canonical()
                .get(name)
                .map(|t| t.spec.clone())
                .ok_or_else(|| Error::Config(format!("no teacher named `{name}` in the suite"))),
        }
    }
}

/// The on-disk config. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    pub teacher: Option<TeacherChoice>,
    pub divergences: Option<Vec<Divergence>>,
    pub mu: Option<f64>,
    pub gap: Option<GapFn>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub snapshot_epochs: Option<Vec<usize>>,
    pub convergence_tol: Option<f64>,
    pub init: Option<StudentInit>,
    pub output_path: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
    pub jobs: Option<usize>,
    pub sequence: Option<SequenceSettings>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub divergences: Vec<Divergence>,
    pub mu: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    pub snapshot_epochs: Vec<usize>,
    pub output_path: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
    pub jobs: Option<usize>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub teacher: TeacherSpec,
    pub divergences: Vec<Divergence>,
    pub mu: f64,
    pub gap: GapFn,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub snapshot_epochs: Vec<usize>,
    pub convergence_tol: f64,
    pub init: StudentInit,
    pub output_path: PathBuf,
    pub output_format: OutputFormat,
    pub jobs: usize,
    pub sequence: SequenceSettings,
}

fn default_teacher() -> TeacherSpec {
    TeacherChoice::Named("bimodal".into())
        .resolve()
        .expect("suite has a bimodal teacher")
}

impl ExperimentConfig {
    /// Built-in defaults for each experiment.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            teacher: default_teacher(),
            divergences: vec![Divergence::Fkl, Divergence::Rkl],
            mu: DEFAULT_MU,
            gap: GapFn::AbsDiff,
            learning_rate: 0.5,
            epochs: 2000,
            seeds: vec![0],
            snapshot_epochs: Vec::new(),
            convergence_tol: 1e-3,
            init: StudentInit::Uniform,
            output_path: PathBuf::from("results").join(experiment.name()),
            output_format: OutputFormat::Csv,
            jobs: 1,
            sequence: SequenceSettings::default(),
        };
        match experiment {
            Experiment::Converge => base,
            Experiment::HeadTail => ExperimentConfig {
                epochs: 250,
                seeds: (1..=50).collect(),
                snapshot_epochs: vec![5],
                init: StudentInit::RandomNormal { sigma: 0.1 },
                ..base
            },
            Experiment::Compare => ExperimentConfig {
                divergences: Divergence::ALL.to_vec(),
                epochs: 50,
                seeds: (1..=50).collect(),
                init: StudentInit::RandomNormal { sigma: 0.1 },
                ..base
            },
            Experiment::Sequence => ExperimentConfig {
                divergences: vec![Divergence::Fkl, Divergence::Rkl, Divergence::Akl],
                // row gradients are summed over ~100 occurrences per context
                learning_rate: 0.005,
                epochs: 2000,
                ..base
            },
        }
    }

    /// Layers `file` and then `flags` over the defaults for `experiment` and
    /// validates the result. All failures are reported as config errors.
    pub fn resolve(experiment: Experiment, file: ConfigFile, flags: Overrides) -> Result<Self> {
        if let Some(e) = file.experiment {
            if e != experiment {
                return Err(Error::Config(format!(
                    "config file is for `{e}` but `{experiment}` was requested"
                )));
            }
        }
        let mut cfg = Self::defaults(experiment);
        if let Some(t) = file.teacher {
            cfg.teacher = t.resolve()?;
        }
        macro_rules! layer {
            ($($field:ident),*) => {$(
                if let Some(v) = file.$field { cfg.$field = v; }
            )*};
        }
        layer!(
            divergences,
            mu,
            gap,
            learning_rate,
            epochs,
            seeds,
            snapshot_epochs,
            convergence_tol,
            init,
            output_path,
            output_format,
            jobs,
            sequence
        );

        if !flags.divergences.is_empty() {
            cfg.divergences = flags.divergences;
        }
        if !flags.seeds.is_empty() {
            cfg.seeds = flags.seeds;
        }
        if !flags.snapshot_epochs.is_empty() {
            cfg.snapshot_epochs = flags.snapshot_epochs;
        }
        macro_rules! flag {
            ($($field:ident),*) => {$(
                if let Some(v) = flags.$field { cfg.$field = v; }
            )*};
        }
        flag!(mu, learning_rate, epochs, output_path, output_format, jobs);

        cfg.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.divergences.is_empty() {
            return Err(Error::Config("at least one divergence is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        validate_mu(self.mu)?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        if let Some(s) = self.snapshot_epochs.iter().find(|&&s| s > self.epochs) {
            return Err(Error::Config(format!(
                "snapshot epoch {s} exceeds {} epochs",
                self.epochs
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.output_path.as_os_str().is_empty() {
            return Err(Error::Config("output path is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Config(format!("seed {s} listed twice")));
            }
        }
        let mut tags = std::collections::HashSet::new();
        for d in &self.divergences {
            if !tags.insert(d.file_stem()) {
                return Err(Error::Config(format!("divergence {d} listed twice")));
            }
        }
        match self.experiment {
            Experiment::Sequence => {
                let s = &self.sequence;
                if s.teacher_model.is_none() && s.vocab < 2 {
                    return Err(Error::Config("sequence.vocab must be at least 2".into()));
                }
                if s.corpus_size == 0 || s.sequence_len == 0 {
                    return Err(Error::Config(
                        "sequence corpus_size and sequence_len must be positive".into(),
                    ));
                }
                if !(s.teacher_scale > 0.0) || !(s.student_scale > 0.0) {
                    return Err(Error::Config("sequence scales must be positive".into()));
                }
            }
            _ => {
                build_teacher(&self.teacher)?;
            }
        }
        Ok(())
    }
}
