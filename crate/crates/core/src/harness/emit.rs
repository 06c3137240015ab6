//! Per-run result files.
//!
//! CSV columns are `epoch,loss,head_error,tail_error,max_abs_error,w_fkl,w_rkl`;
//! the weight cells are empty for non-adaptive losses. JSON carries the same
//! columns as `{"version": 1, "records": [...]}` with `null` weights. Floats are
//! written with 17 significant digits so that parsing restores the exact bits.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SequenceLossReport;
use crate::toy::{EpochRecord, TrainingTrace};

pub const RESULTS_FORMAT_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 7] = [
    "epoch",
    "loss",
    "head_error",
    "tail_error",
    "max_abs_error",
    "w_fkl",
    "w_rkl",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid(format!("unknown output format `{other}`"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// Anything that can be flattened into result rows.
pub trait ResultRows {
    fn result_rows(&self) -> Vec<EpochRecord>;
}

impl ResultRows for TrainingTrace {
    fn result_rows(&self) -> Vec<EpochRecord> {
        self.records.clone()
    }
}

/// One row per token position; the `epoch` column holds the position.
impl ResultRows for SequenceLossReport {
    fn result_rows(&self) -> Vec<EpochRecord> {
        self.per_token
            .iter()
            .zip(&self.per_token_weights)
            .zip(&self.per_token_errors)
            .enumerate()
            .map(|(t, ((ev, w), err))| EpochRecord {
                epoch: t,
                loss: ev.value,
                head_error: err.head,
                tail_error: err.tail,
                max_abs_error: err.max_abs,
                weights: *w,
            })
            .collect()
    }
}

impl ResultRows for [EpochRecord] {
    fn result_rows(&self) -> Vec<EpochRecord> {
        self.to_vec()
    }
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON formatter writing every `f64` with 17 significant digits.
#[derive(Debug, Default, Clone, Copy)]
pub struct RoundTripFormatter;

impl serde_json::ser::Formatter for RoundTripFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_float(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

/// Serializes with [`RoundTripFormatter`], newline-terminated.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, RoundTripFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Serde(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Serde(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    epoch: usize,
    loss: f64,
    head_error: f64,
    tail_error: f64,
    max_abs_error: f64,
    w_fkl: Option<f64>,
    w_rkl: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonResults {
    version: u32,
    records: Vec<JsonRecord>,
}

pub fn render_csv(rows: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let (wf, wr) = match r.weights {
            Some((a, b)) => (format_float(a), format_float(b)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.epoch.to_string(),
            format_float(r.loss),
            format_float(r.head_error),
            format_float(r.tail_error),
            format_float(r.max_abs_error),
            wf,
            wr,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn render_json(rows: &[EpochRecord]) -> Result<String> {
    let doc = JsonResults {
        version: RESULTS_FORMAT_VERSION,
        records: rows
            .iter()
            .map(|r| JsonRecord {
                epoch: r.epoch,
                loss: r.loss,
                head_error: r.head_error,
                tail_error: r.tail_error,
                max_abs_error: r.max_abs_error,
                w_fkl: r.weights.map(|w| w.0),
                w_rkl: r.weights.map(|w| w.1),
            })
            .collect(),
    };
    to_json_string(&doc)
}

pub fn render(rows: &[EpochRecord], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => render_csv(rows),
        OutputFormat::Json => render_json(rows),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Serde(format!("bad float `{s}`")))
}

pub fn parse_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Serde(format!("unexpected header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let weights = match (field(5), field(6)) {
                ("", "") => None,
                (a, b) => Some((parse_f64(a)?, parse_f64(b)?)),
            };
            Ok(EpochRecord {
                epoch: field(0)
                    .parse()
                    .map_err(|_| Error::Serde(format!("bad epoch `{}`", field(0))))?,
                loss: parse_f64(field(1))?,
                head_error: parse_f64(field(2))?,
                tail_error: parse_f64(field(3))?,
                max_abs_error: parse_f64(field(4))?,
                weights,
            })
        })
        .collect()
}

pub fn parse_json(text: &str) -> Result<Vec<EpochRecord>> {
    let doc: JsonResults = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
    if doc.version != RESULTS_FORMAT_VERSION {
        return Err(Error::Serde(format!(
            "unsupported results version {}",
            doc.version
        )));
    }
    doc.records
        .into_iter()
        .map(|r| {
            let weights = match (r.w_fkl, r.w_rkl) {
                (Some(a), Some(b)) => Some((a, b)),
                (None, None) => None,
                _ => return Err(Error::Serde("only one weight present".into())),
            };
            Ok(EpochRecord {
                epoch: r.epoch,
                loss: r.loss,
                head_error: r.head_error,
                tail_error: r.tail_error,
                max_abs_error: r.max_abs_error,
                weights,
            })
        })
        .collect()
}

pub fn parse(text: &str, format: OutputFormat) -> Result<Vec<EpochRecord>> {
    match format {
        OutputFormat::Csv => parse_csv(text),
        OutputFormat::Json => parse_json(text),
    }
}

/// Writes via a temporary file in the target directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn emit_results<T: ResultRows + ?Sized>(
    trace: &T,
    format: OutputFormat,
    path: &Path,
) -> Result<()> {
    let text = render(&trace.result_rows(), format)?;
    write_atomic(path, text.as_bytes())
}
