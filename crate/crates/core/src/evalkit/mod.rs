//! Retrieval evaluation: metrics, a batch harness over query and relevance
//! files, and a synthetic multi-checkpoint fixture.
//!
//! Query and relevance files are line-delimited JSON:
//!
//! ```text
//! {"query_id":"q1","text":"polo neck t-shirt","vectors":{"epoch10":[...]}}
//! {"query_id":"q1","relevant":["img-1","img-7"]}
//! ```

mod harness;
mod metrics;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use harness::{run_eval, run_eval_with_progress, EvalConfig, EvalReport, QueryScore, SystemReport};
pub use metrics::{average_precision_at_k, mean_average_precision, precision_at_k, ApDenominator};
pub use synth::{synth_fixture, write_fixture, SynthFixture, SynthSpec};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("no queries")]
    NoQueries,
    #[error("no relevance judgment for query {0:?}")]
    MissingJudgment(String),
    #[error("query {query_id:?}: {message}")]
    QueryVectors { query_id: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("query {query_id:?} failed: {message}")]
    Pipeline { query_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Query vector per model id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<BTreeMap<String, Vec<f32>>>,
    /// Row label for the per-category table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub relevant: BTreeSet<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = File::open(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>, EvalError> {
    read_jsonl(path)
}

pub fn read_qrels(path: &Path) -> Result<Vec<RelevanceJudgment>, EvalError> {
    read_jsonl(path)
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<(), EvalError> {
    write_jsonl(path, queries)
}

pub fn write_qrels(path: &Path, qrels: &[RelevanceJudgment]) -> Result<(), EvalError> {
    write_jsonl(path, qrels)
}
