//! Exact cosine top-k retrieval, one list per checkpoint.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{l2_norm, EmbeddingMatrix, ModelSet};

/// Per-model list size used before ensembling.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("k must be positive")]
    ZeroK,
    #[error("query has {found} components, expected {expected}")]
    QueryDim { expected: usize, found: usize },
    #[error("query vector is zero or non-finite")]
    DegenerateQuery,
    #[error("expected {expected} query vectors (one per model), got {found}")]
    QueryCount { expected: usize, found: usize },
}

/// One entry of a single model's ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub item_id: String,
    pub model_index: usize,
    pub similarity: f64,
    /// 1-based position within the model's list.
    pub rank: usize,
}

/// Descending similarity, then ascending item id.
pub fn hit_order(a_sim: f64, a_id: &str, b_sim: f64, b_id: &str) -> Ordering {
    b_sim.total_cmp(&a_sim).then_with(|| a_id.cmp(b_id))
}

fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * y).sum()
}

/// Returns the `k` items most cosine-similar to `query`, best first.
///
/// Ties are broken by item id so the result is a total order independent of
/// corpus record order. `k` larger than the corpus returns every item.
pub fn cosine_topk(matrix: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, SearchError> {
    cosine_topk_tagged(matrix, query, k, 0)
}

fn cosine_topk_tagged(
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
    model_index: usize,
) -> Result<Vec<RetrievalHit>, SearchError> {
    if k == 0 {
        return Err(SearchError::ZeroK);
    }
    if query.len() != matrix.dim() {
        return Err(SearchError::QueryDim {
            expected: matrix.dim(),
            found: query.len(),
        });
    }
    let qnorm = l2_norm(query);
    if qnorm == 0.0 || !qnorm.is_finite() {
        return Err(SearchError::DegenerateQuery);
    }
    let q: Vec<f64> = query.iter().map(|&x| f64::from(x) / qnorm).collect();

    let mut scored: Vec<(f64, usize)> = matrix
        .iter()
        .enumerate()
        .map(|(row, (_, v))| {
            let mut s = dot(v, &q);
            if !matrix.is_normalized() {
                let n = l2_norm(v);
                s = if n > 0.0 { s / n } else { 0.0 };
            }
            (s, row)
        })
        .collect();

    let ids = matrix.ids();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| hit_order(a.0, &ids[a.1], b.0, &ids[b.1]);
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);

    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (similarity, row))| RetrievalHit {
            item_id: ids[row].clone(),
            model_index,
            similarity,
            rank: i + 1,
        })
        .collect())
}

/// Runs one top-k query per checkpoint. `queries[n]` must be the query as
/// encoded by model `n`'s own text encoder.
pub fn multi_model_retrieve<Q: AsRef<[f32]>>(
    set: &ModelSet,
    queries: &[Q],
    k: usize,
) -> Result<Vec<Vec<RetrievalHit>>, SearchError> {
    if queries.len() != set.z() {
        return Err(SearchError::QueryCount {
            expected: set.z(),
            found: queries.len(),
        });
    }
    set.models()
        .iter()
        .zip(queries)
        .enumerate()
        .map(|(n, (m, q))| cosine_topk_tagged(m, q.as_ref(), k, n))
        .collect()
}
