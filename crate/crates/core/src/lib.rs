//! Ensemble retrieval over several checkpoints of one embedding model.
//!
//! Each checkpoint retrieves its own top-k images for a query. The lists are
//! pooled, every (model, image) occurrence is projected to 2-D with t-SNE and
//! clustered with K-means, and images are emitted cluster by cluster starting
//! from the most frequently retrieved one. [`evalkit`] measures the result
//! with precision@k and mean average precision.

pub mod cluster;
pub mod corpus;
pub mod dimred;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod ranker;
pub mod search;

pub use cluster::{kmeans, select_k, silhouette, ClusterAssignment, KSelection};
pub use corpus::{open_model_set, read_store, write_store, EmbeddingMatrix, ModelSet};
pub use dimred::{trustworthiness, tsne_2d, Projection2D, TsneParams};
pub use error::{Error, Result};
pub use pipeline::{rank_hit_lists, run_query, PipelineConfig};
pub use ranker::{
    build_candidate_pool, enclip_rank, select_heads, weighted_score, CandidatePool, Comparator, RankedResult,
};
pub use search::{cosine_topk, multi_model_retrieve, RetrievalHit};
