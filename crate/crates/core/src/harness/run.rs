use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::adaptive::Divergence;
use crate::divergence::Distribution;
use crate::error::{Error, Result};
use crate::harness::config::{Experiment, ExperimentConfig};
use crate::harness::emit::{render, to_json_string, write_atomic};
use crate::sequence::{distill_sequences, sample_corpus, TabularLM};
use crate::toy::{build_teacher, init_student, train, TrainConfig, TrainingTrace};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotMetrics {
    pub epoch: usize,
    pub head_error: f64,
    pub tail_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub divergence: Divergence,
    pub file: String,
    pub converged_at: Option<usize>,
    pub final_loss: f64,
    pub final_head_error: f64,
    pub final_tail_error: f64,
    pub final_max_abs_error: f64,
    pub snapshots: Vec<SnapshotMetrics>,
}

/// How many seeds satisfied a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedFraction {
    pub satisfied: usize,
    pub total: usize,
    pub fraction: f64,
}

impl SeedFraction {
    fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let (mut satisfied, mut total) = (0, 0);
        for f in flags {
            total += 1;
            satisfied += usize::from(f);
        }
        SeedFraction {
            satisfied,
            total,
            fraction: if total == 0 {
                0.0
            } else {
                satisfied as f64 / total as f64
            },
        }
    }
}

/// Fraction of seeds where FKL has the lower head error and RKL the lower
/// tail error, at one snapshot epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadTailOrdering {
    pub epoch: usize,
    pub fkl_head_and_rkl_tail: SeedFraction,
    pub fkl_head_only: SeedFraction,
    pub rkl_tail_only: SeedFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub version: u32,
    pub experiment: Experiment,
    pub runs: Vec<RunRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub head_tail: Vec<HeadTailOrdering>,
    /// Seeds where AKL's final max error is at most the larger of FKL's and RKL's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub akl_within_fkl_rkl: Option<SeedFraction>,
}

impl Summary {
    pub fn run(&self, seed: u64, divergence: Divergence) -> Option<&RunRow> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.divergence == divergence)
    }
}

/// Per-run results held in memory before anything is written.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub seed: u64,
    pub divergence: Divergence,
    pub trace: TrainingTrace,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: Summary,
    pub cells: Vec<CellResult>,
    pub files: Vec<PathBuf>,
}

pub fn cell_file_name(cfg: &ExperimentConfig, seed: u64, divergence: Divergence) -> String {
    format!(
        "{}_seed{}_{}.{}",
        cfg.experiment,
        seed,
        divergence.file_stem(),
        cfg.output_format.extension()
    )
}

fn train_config(cfg: &ExperimentConfig, seed: u64, divergence: Divergence) -> TrainConfig {
    TrainConfig {
        divergence,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        mu: cfg.mu,
        gap: cfg.gap,
        seed,
        init: cfg.init.clone(),
        snapshot_epochs: cfg.snapshot_epochs.clone(),
        convergence_tol: cfg.convergence_tol,
    }
}

fn load_sequence_teacher(cfg: &ExperimentConfig) -> Result<TabularLM> {
    let s = &cfg.sequence;
    match &s.teacher_model {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TabularLM::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
        None => TabularLM::random(s.vocab, s.order, s.teacher_scale, s.teacher_seed),
    }
}

enum Teacher {
    Toy(Distribution),
    Tabular(TabularLM),
}

fn run_cell(
    cfg: &ExperimentConfig,
    teacher: &Teacher,
    seed: u64,
    divergence: Divergence,
) -> Result<CellResult> {
    let tcfg = train_config(cfg, seed, divergence);
    let trace = match teacher {
        Teacher::Toy(p) => {
            // identical across divergences for a given seed: shared initialization
            let student0 = init_student(p.len(), seed, &cfg.init)?;
            train(p, &student0, &tcfg)?
        }
        Teacher::Tabular(t) => {
            let s = &cfg.sequence;
            let corpus = sample_corpus(t, s.corpus_size, s.sequence_len, seed)?;
            let student0 =
                TabularLM::random(t.vocab(), t.order(), s.student_scale, seed.wrapping_add(1))?;
            distill_sequences(t, &student0, &corpus, &tcfg)?.trace
        }
    };
    Ok(CellResult {
        seed,
        divergence,
        trace,
    })
}

fn run_row(cfg: &ExperimentConfig, cell: &CellResult) -> RunRow {
    let last = cell.trace.last().copied();
    let snapshots = cfg
        .snapshot_epochs
        .iter()
        .filter_map(|&e| cell.trace.at(e))
        .map(|r| SnapshotMetrics {
            epoch: r.epoch,
            head_error: r.head_error,
            tail_error: r.tail_error,
            max_abs_error: r.max_abs_error,
        })
        .collect();
    RunRow {
        seed: cell.seed,
        divergence: cell.divergence,
        file: cell_file_name(cfg, cell.seed, cell.divergence),
        converged_at: cell.trace.converged_at,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_head_error: last.map_or(f64::NAN, |r| r.head_error),
        final_tail_error: last.map_or(f64::NAN, |r| r.tail_error),
        final_max_abs_error: last.map_or(f64::NAN, |r| r.max_abs_error),
        snapshots,
    }
}

fn find(cells: &[CellResult], seed: u64, d: Divergence) -> Option<&TrainingTrace> {
    cells
        .iter()
        .find(|c| c.seed == seed && c.divergence == d)
        .map(|c| &c.trace)
}

fn head_tail_orderings(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<HeadTailOrdering> {
    let has = |d| cfg.divergences.contains(&d);
    if !has(Divergence::Fkl) || !has(Divergence::Rkl) {
        return Vec::new();
    }
    cfg.snapshot_epochs
        .iter()
        .map(|&epoch| {
            let pairs: Vec<_> = cfg
                .seeds
                .iter()
                .filter_map(|&s| {
                    let f = find(cells, s, Divergence::Fkl)?.at(epoch)?;
                    let r = find(cells, s, Divergence::Rkl)?.at(epoch)?;
                    Some((f.head_error < r.head_error, r.tail_error < f.tail_error))
                })
                .collect();
            HeadTailOrdering {
                epoch,
                fkl_head_and_rkl_tail: SeedFraction::from_flags(
                    pairs.iter().map(|(h, t)| *h && *t),
                ),
                fkl_head_only: SeedFraction::from_flags(pairs.iter().map(|(h, _)| *h)),
                rkl_tail_only: SeedFraction::from_flags(pairs.iter().map(|(_, t)| *t)),
            }
        })
        .collect()
}

fn akl_within(cfg: &ExperimentConfig, cells: &[CellResult]) -> Option<SeedFraction> {
    let needed = [Divergence::Fkl, Divergence::Rkl, Divergence::Akl];
    if !needed.iter().all(|d| cfg.divergences.contains(d)) {
        return None;
    }
    let flags: Vec<bool> = cfg
        .seeds
        .iter()
        .filter_map(|&s| {
            let err = |d| {
                find(cells, s, d)
                    .and_then(|t| t.last())
                    .map(|r| r.max_abs_error)
            };
            Some(err(Divergence::Akl)? <= err(Divergence::Fkl)?.max(err(Divergence::Rkl)?))
        })
        .collect();
    Some(SeedFraction::from_flags(flags))
}

/// Runs every (seed, divergence) cell without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<(Summary, Vec<CellResult>)> {
    cfg.validate()?;
    let teacher = match cfg.experiment {
        Experiment::Sequence => Teacher::Tabular(load_sequence_teacher(cfg)?),
        _ => Teacher::Toy(build_teacher(&cfg.teacher)?),
    };
    let grid: Vec<(u64, Divergence)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.divergences.iter().map(move |&d| (s, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        grid.par_iter()
            .map(|&(seed, d)| {
                run_cell(cfg, &teacher, seed, d).map_err(|e| Error::RunFailed {
                    seed,
                    divergence: d.to_string(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let summary = Summary {
        version: SUMMARY_FORMAT_VERSION,
        experiment: cfg.experiment,
        runs: cells.iter().map(|c| run_row(cfg, c)).collect(),
        head_tail: match cfg.experiment {
            Experiment::HeadTail | Experiment::Compare => head_tail_orderings(cfg, &cells),
            _ => Vec::new(),
        },
        akl_within_fkl_rkl: akl_within(cfg, &cells),
    };
    Ok((summary, cells))
}

/// Runs the experiment and writes one results file per (seed, divergence)
/// plus `summary.json` into the output directory. Nothing is written unless
/// every run succeeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (summary, cells) = execute(cfg)?;
    let rendered = cells
        .iter()
        .map(|c| {
            let name = cell_file_name(cfg, c.seed, c.divergence);
            render(&c.trace.records, cfg.output_format).map(|text| (name, text))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary_text = to_json_string(&summary)?;

    let dir: &Path = &cfg.output_path;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(rendered.len() + 1);
    for (name, text) in rendered {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        files.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    write_atomic(&path, summary_text.as_bytes())?;
    files.push(path);
    Ok(ExperimentOutput {
        summary,
        cells,
        files,
    })
}
