//! Request types and the handlers shared by the HTTP API and the CLI.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use enclip_core::evalkit::{
    read_qrels, read_queries, run_eval_with_progress, ApDenominator, EvalConfig, EvalError, EvalReport, QueryRecord,
    RelevanceJudgment,
};
use enclip_core::pipeline::{PipelineConfig, DEFAULT_N};
use enclip_core::search::DEFAULT_TOP_K;
use enclip_core::{run_query, Comparator, ModelSet, RankedResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, HttpEncoder};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("upstream encoder error: {0}")]
    Upstream(#[from] EncoderError),
    #[error(transparent)]
    Pipeline(#[from] enclip_core::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("internal error: {0}")]
    Internal(String),
}

pub(crate) const NO_ENCODER: &str =
    "text queries need an encoder: set --encoder-url or ENCLIP_ENCODER_URL, or send query_vectors";

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_n() -> usize {
    DEFAULT_N
}
fn default_k_min() -> usize {
    enclip_core::cluster::DEFAULT_K_MIN
}
fn default_k_max() -> usize {
    enclip_core::cluster::DEFAULT_K_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub query_vectors: Option<BTreeMap<String, Vec<f32>>>,
    #[serde(default = "default_top_k")]
    pub top_k_per_model: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub comparator: Comparator,
    #[serde(default)]
    pub include_diagnostics: bool,
}

impl Default for SearchRequest {
    fn default() -> Self {
        Self {
            text: None,
            query_vectors: None,
            top_k_per_model: DEFAULT_TOP_K,
            n: DEFAULT_N,
            k_min: default_k_min(),
            k_max: default_k_max(),
            seed: 0,
            comparator: Comparator::default(),
            include_diagnostics: false,
        }
    }
}

impl SearchRequest {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            top_k_per_model: self.top_k_per_model,
            n: self.n,
            k_min: self.k_min,
            k_max: self.k_max,
            seed: self.seed,
            comparator: self.comparator,
            ..PipelineConfig::default()
        }
    }

    fn validate(&self, set: &ModelSet) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::BadRequest(m));
        match (&self.text, &self.query_vectors) {
            (Some(_), Some(_)) => return bad("send either text or query_vectors, not both".into()),
            (None, None) => return bad("one of text or query_vectors is required".into()),
            _ => {}
        }
        if self.n < 1 {
            return bad("n must be at least 1".into());
        }
        if self.top_k_per_model < 1 {
            return bad("top_k_per_model must be at least 1".into());
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return bad(format!("invalid K range {}..={}", self.k_min, self.k_max));
        }
        if let Some(vectors) = &self.query_vectors {
            if let Some(unknown) = vectors.keys().find(|id| set.index_of(id).is_none()) {
                return bad(format!("unknown model_id {unknown:?}"));
            }
            if let Some(missing) = set.models().iter().find(|m| !vectors.contains_key(m.model_id())) {
                return bad(format!("missing query vector for model {:?}", missing.model_id()));
            }
            if let Some((id, v)) = vectors.iter().find(|(_, v)| v.len() != set.dim()) {
                return bad(format!(
                    "query vector for {id:?} has {} components, expected {}",
                    v.len(),
                    set.dim()
                ));
            }
        }
        Ok(())
    }
}

/// Resolves the per-model query vectors and runs the ensemble ranking.
pub async fn handle_search(
    set: Arc<ModelSet>,
    encoder: Option<&HttpEncoder>,
    req: SearchRequest,
) -> Result<RankedResult, ServiceError> {
    req.validate(&set)?;
    let vectors = match (&req.query_vectors, &req.text) {
        (Some(v), _) => v.clone(),
        (None, Some(text)) => {
            let encoder = encoder.ok_or_else(|| ServiceError::BadRequest(NO_ENCODER.into()))?;
            encoder.encode_all(&set, text).await?
        }
        (None, None) => unreachable!("validated"),
    };
    let config = req.pipeline_config();
    let include = req.include_diagnostics;
    tokio::task::spawn_blocking(move || {
        let ordered: Vec<&[f32]> = set.models().iter().map(|m| vectors[m.model_id()].as_slice()).collect();
        let mut result = run_query(&set, &ordered, &config)?;
        if !include {
            result.diagnostics = None;
        }
        Ok(result)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn default_eval_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub queries: PathBuf,
    pub qrels: PathBuf,
    #[serde(default = "default_eval_k")]
    pub k: usize,
    #[serde(default)]
    pub denominator: ApDenominator,
    #[serde(default)]
    pub comparator: Comparator,
    #[serde(default = "default_top_k")]
    pub top_k_per_model: usize,
    /// Defaults to max(10, k).
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EvalRequest {
    pub fn new(queries: PathBuf, qrels: PathBuf) -> Self {
        Self {
            queries,
            qrels,
            k: default_eval_k(),
            denominator: ApDenominator::default(),
            comparator: Comparator::default(),
            top_k_per_model: DEFAULT_TOP_K,
            n: None,
            k_min: default_k_min(),
            k_max: default_k_max(),
            seed: 0,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k: self.k,
            denominator: self.denominator,
            pipeline: PipelineConfig {
                top_k_per_model: self.top_k_per_model,
                n: self.n.unwrap_or(DEFAULT_N.max(self.k)),
                k_min: self.k_min,
                k_max: self.k_max,
                seed: self.seed,
                comparator: self.comparator,
                ..PipelineConfig::default()
            },
        }
    }
}

/// Loads the query and relevance files and encodes text-only queries.
pub async fn prepare_eval(
    set: &ModelSet,
    req: &EvalRequest,
    encoder: Option<&HttpEncoder>,
) -> Result<(Vec<QueryRecord>, Vec<RelevanceJudgment>), ServiceError> {
    let mut queries = read_queries(&req.queries)?;
    if queries.is_empty() {
        return Err(ServiceError::BadRequest("no queries".into()));
    }
    let qrels = read_qrels(&req.qrels)?;
    if queries.iter().any(|q| q.vectors.is_none()) {
        if let Some(q) = queries.iter().find(|q| q.vectors.is_none() && q.text.is_none()) {
            return Err(ServiceError::BadRequest(format!(
                "query {:?} has neither text nor vectors",
                q.query_id
            )));
        }
        let encoder = encoder.ok_or_else(|| ServiceError::BadRequest(NO_ENCODER.into()))?;
        encoder.resolve_queries(set, &mut queries).await?;
    }
    Ok((queries, qrels))
}

/// Loads, encodes and evaluates in one go.
pub async fn handle_eval(
    set: Arc<ModelSet>,
    req: EvalRequest,
    encoder: Option<&HttpEncoder>,
    progress: Arc<dyn Fn(usize, usize) + Send + Sync>,
) -> Result<EvalReport, ServiceError> {
    let (queries, qrels) = prepare_eval(&set, &req, encoder).await?;
    let config = req.eval_config();
    tokio::task::spawn_blocking(move || {
        run_eval_with_progress(&set, &queries, &qrels, &config, &*progress).map_err(ServiceError::from)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}
