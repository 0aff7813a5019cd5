use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{average_precision_at_k, mean_average_precision, precision_at_k, ApDenominator};
use super::{EvalError, QueryRecord, RelevanceJudgment};
use crate::corpus::ModelSet;
use crate::pipeline::{run_query, PipelineConfig};
use crate::search::cosine_topk;

pub const DEFAULT_EVAL_K: usize = 10;
const ENSEMBLE_COLUMN: &str = "ENCLIP";
const ALL_ROW: &str = "All";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub denominator: ApDenominator,
    pub pipeline: PipelineConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_EVAL_K,
            denominator: ApDenominator::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryScore {
    pub prec_at_k: f64,
    pub avg_prec_at_k: f64,
}

/// Scores of one system (a single checkpoint or the ensemble).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemReport {
    pub name: String,
    pub per_query: BTreeMap<String, QueryScore>,
    pub map_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub queries: usize,
    /// mAP per system, in the order of [`EvalReport::columns`].
    pub map_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Ensemble scores per query.
    pub per_query: BTreeMap<String, QueryScore>,
    /// Ensemble mAP.
    pub map_score: f64,
    /// Plain cosine ranking of each checkpoint alone, in epoch order.
    pub baselines: Vec<SystemReport>,
    pub columns: Vec<String>,
    pub categories: Vec<CategoryRow>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Grid of mAP values: one row per category, one column per checkpoint
    /// plus the ensemble.
    pub fn table(&self) -> String {
        let label_w = self
            .categories
            .iter()
            .map(|r| r.category.len())
            .chain([ALL_ROW.len(), "Category".len()])
            .max()
            .unwrap_or(8);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(7)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "mAP for AVG_PREC@{} (queries: {})", self.config.k, self.per_query.len());
        let _ = write!(out, "{:<label_w$} | {:>5}", "Category", "n");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
        let rule = label_w + 8 + col_w.iter().map(|w| w + 3).sum::<usize>();
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        let overall = CategoryRow {
            category: ALL_ROW.to_string(),
            queries: self.per_query.len(),
            map_scores: self
                .baselines
                .iter()
                .map(|b| b.map_score)
                .chain([self.map_score])
                .collect(),
        };
        for row in self.categories.iter().chain([&overall]) {
            let _ = write!(out, "{:<label_w$} | {:>5}", row.category, row.queries);
            for (v, w) in row.map_scores.iter().zip(&col_w) {
                let _ = write!(out, " | {v:>w$.3}");
            }
            out.push('\n');
        }
        out
    }
}

fn resolve_vectors<'a>(set: &ModelSet, q: &'a QueryRecord) -> Result<Vec<&'a [f32]>, EvalError> {
    let err = |message: String| EvalError::QueryVectors {
        query_id: q.query_id.clone(),
        message,
    };
    let vectors = q
        .vectors
        .as_ref()
        .ok_or_else(|| err("no query vectors (text queries must be encoded first)".into()))?;
    if let Some(unknown) = vectors.keys().find(|id| set.index_of(id).is_none()) {
        return Err(err(format!("unknown model id {unknown:?}")));
    }
    set.models()
        .iter()
        .map(|m| {
            vectors
                .get(m.model_id())
                .map(Vec::as_slice)
                .ok_or_else(|| err(format!("missing vector for model {:?}", m.model_id())))
        })
        .collect()
}

struct QueryOutcome {
    ensemble: QueryScore,
    baselines: Vec<QueryScore>,
}

fn score(ranked: &[&str], relevant: &HashSet<String>, config: &EvalConfig) -> Result<QueryScore, EvalError> {
    Ok(QueryScore {
        prec_at_k: precision_at_k(ranked, relevant, config.k)?,
        avg_prec_at_k: average_precision_at_k(ranked, relevant, config.k, config.denominator)?,
    })
}

fn evaluate_query(
    set: &ModelSet,
    q: &QueryRecord,
    relevant: &HashSet<String>,
    config: &EvalConfig,
) -> Result<QueryOutcome, EvalError> {
    let vectors = resolve_vectors(set, q)?;
    let failed = |message: String| EvalError::Pipeline {
        query_id: q.query_id.clone(),
        message,
    };
    let result = run_query(set, &vectors, &config.pipeline).map_err(|e| failed(e.to_string()))?;
    let ensemble = score(&result.item_ids(), relevant, config)?;
    let baselines = set
        .models()
        .iter()
        .zip(&vectors)
        .map(|(m, v)| {
            let hits = cosine_topk(m, v, config.k).map_err(|e| failed(e.to_string()))?;
            let ids: Vec<&str> = hits.iter().map(|h| h.item_id.as_str()).collect();
            score(&ids, relevant, config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QueryOutcome { ensemble, baselines })
}

/// Evaluates the ensemble and every single checkpoint on a query set.
pub fn run_eval(
    set: &ModelSet,
    queries: &[QueryRecord],
    qrels: &[RelevanceJudgment],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    run_eval_with_progress(set, queries, qrels, config, &|_, _| {})
}

/// [`run_eval`] with a callback receiving `(finished, total)` after each query.
pub fn run_eval_with_progress(
    set: &ModelSet,
    queries: &[QueryRecord],
    qrels: &[RelevanceJudgment],
    config: &EvalConfig,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<EvalReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if config.k < 1 {
        return Err(EvalError::ZeroK);
    }
    if config.pipeline.n < config.k {
        return Err(EvalError::Config(format!(
            "N = {} must be at least k = {}",
            config.pipeline.n, config.k
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = queries.iter().find(|q| !seen.insert(q.query_id.as_str())) {
        return Err(EvalError::Config(format!("duplicate query id {:?}", dup.query_id)));
    }

    let mut warnings = Vec::new();
    let mut judgments: HashMap<&str, HashSet<String>> = HashMap::new();
    for j in qrels {
        if j.relevant.is_empty() {
            warnings.push(format!("query {:?} has an empty relevant set", j.query_id));
        }
        let unknown = j.relevant.iter().filter(|id| !set.contains_item(id)).count();
        if unknown > 0 {
            warnings.push(format!(
                "query {:?}: {unknown} relevant ids are not in the corpus",
                j.query_id
            ));
        }
        judgments
            .entry(j.query_id.as_str())
            .or_default()
            .extend(j.relevant.iter().cloned());
    }
    if let Some(q) = queries.iter().find(|q| !judgments.contains_key(q.query_id.as_str())) {
        return Err(EvalError::MissingJudgment(q.query_id.clone()));
    }

    let total = queries.len();
    let done = AtomicUsize::new(0);
    let outcomes = queries
        .par_iter()
        .map(|q| {
            let out = evaluate_query(set, q, &judgments[q.query_id.as_str()], config);
            progress(done.fetch_add(1, Ordering::SeqCst) + 1, total);
            out
        })
        .collect::<Result<Vec<_>, _>>()?;

    let system = |name: String, pick: &dyn Fn(&QueryOutcome) -> QueryScore| -> Result<SystemReport, EvalError> {
        let per_query: BTreeMap<String, QueryScore> = queries
            .iter()
            .zip(&outcomes)
            .map(|(q, o)| (q.query_id.clone(), pick(o)))
            .collect();
        let aps: Vec<f64> = outcomes.iter().map(|o| pick(o).avg_prec_at_k).collect();
        Ok(SystemReport {
            name,
            per_query,
            map_score: mean_average_precision(&aps)?,
        })
    };
    let baselines = set
        .models()
        .iter()
        .enumerate()
        .map(|(n, m)| system(m.model_id().to_string(), &|o| o.baselines[n]))
        .collect::<Result<Vec<_>, _>>()?;
    let ensemble = system(ENSEMBLE_COLUMN.to_string(), &|o| o.ensemble)?;

    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_category.entry(q.category.as_deref().unwrap_or("-")).or_default().push(i);
    }
    let categories = if by_category.len() > 1 {
        by_category
            .into_iter()
            .map(|(category, idx)| {
                let col = |f: &dyn Fn(&QueryOutcome) -> f64| {
                    let v: Vec<f64> = idx.iter().map(|&i| f(&outcomes[i])).collect();
                    mean_average_precision(&v)
                };
                let mut map_scores = (0..set.z())
                    .map(|n| col(&|o| o.baselines[n].avg_prec_at_k))
                    .collect::<Result<Vec<_>, _>>()?;
                map_scores.push(col(&|o| o.ensemble.avg_prec_at_k)?);
                Ok(CategoryRow {
                    category: category.to_string(),
                    queries: idx.len(),
                    map_scores,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?
    } else {
        Vec::new()
    };

    let mut columns: Vec<String> = baselines.iter().map(|b| b.name.clone()).collect();
    columns.push(ENSEMBLE_COLUMN.to_string());
    Ok(EvalReport {
        config: config.clone(),
        per_query: ensemble.per_query,
        map_score: ensemble.map_score,
        baselines,
        columns,
        categories,
        warnings,
    })
}
