use thiserror::Error;

use crate::cluster::ClusterError;
use crate::corpus::CorpusError;
use crate::dimred::DimredError;
use crate::evalkit::EvalError;
use crate::ranker::RankError;
use crate::search::SearchError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("t-SNE: {0}")]
    Dimred(#[from] DimredError),
    #[error("clustering: {0}")]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
