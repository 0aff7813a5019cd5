//! Query-time flow: per-model retrieval, pooling, projection, clustering and
//! cluster-guided ranking.

use serde::{Deserialize, Serialize};

use crate::cluster::{select_k, DEFAULT_K_MAX, DEFAULT_K_MIN};
use crate::corpus::ModelSet;
use crate::dimred::{tsne_2d, TsneParams};
use crate::error::Result;
use crate::ranker::{build_candidate_pool, enclip_rank, Comparator, Diagnostics, RankedResult};
use crate::search::{multi_model_retrieve, RetrievalHit, DEFAULT_TOP_K};

/// Default number of images returned.
pub const DEFAULT_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub top_k_per_model: usize,
    pub n: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Seeds both t-SNE and K-means.
    pub seed: u64,
    pub comparator: Comparator,
    /// Projection settings; the seed field here is ignored in favour of `seed`.
    pub tsne: TsneParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k_per_model: DEFAULT_TOP_K,
            n: DEFAULT_N,
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            seed: 0,
            comparator: Comparator::default(),
            tsne: TsneParams::default(),
        }
    }
}

/// Runs the full ranking for one query. `queries[n]` is the query encoded by
/// model `n` of `set`.
pub fn run_query<Q: AsRef<[f32]>>(set: &ModelSet, queries: &[Q], config: &PipelineConfig) -> Result<RankedResult> {
    let lists = multi_model_retrieve(set, queries, config.top_k_per_model)?;
    rank_hit_lists(set, &lists, config)
}

/// Ranks already retrieved per-model lists.
pub fn rank_hit_lists(set: &ModelSet, lists: &[Vec<RetrievalHit>], config: &PipelineConfig) -> Result<RankedResult> {
    let pool = build_candidate_pool(lists, set)?;
    let points = pool.point_matrix(set)?;
    let params = config.tsne.clone().with_seed(config.seed);
    let projection = tsne_2d(&points, set.dim(), &params)?;
    let selection = select_k(&projection.coords, config.k_min, config.k_max, config.seed)?;
    let mut result = enclip_rank(&pool, &selection.assignment.labels, config.n, config.comparator)?;
    result.diagnostics = Some(Diagnostics {
        points: pool.points().to_vec(),
        coords: projection.coords,
        labels: selection.assignment.labels,
        k: selection.k,
        silhouette: selection.assignment.silhouette,
        warnings: selection.warnings,
    });
    Ok(result)
}
