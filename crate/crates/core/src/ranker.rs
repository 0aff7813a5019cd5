//! Ensemble candidate pooling and cluster-guided ranking.
//!
//! Every checkpoint contributes its top-k list. An image that shows up in
//! several lists is a stronger candidate: its *frequency* counts the lists it
//! occurs in and its *weighted score* sums a per-model weight that doubles
//! with each later checkpoint:
//!
//! ```text
//! weighted_score = Σ_{n=0}^{z-1} 0.1 · 2^n · occurrence[n]
//! ```
//!
//! Each (model, image) occurrence is a point. Points are projected and
//! clustered elsewhere; [`enclip_rank`] then walks the heads (images sorted by
//! frequency) and, for every head, emits all images sharing a cluster with any
//! of the head's points, sorted by the configured comparator.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ModelSet;
use crate::search::RetrievalHit;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("empty pool: no model returned any hit")]
    EmptyPool,
    #[error("expected {expected} hit lists (one per model), got {found}")]
    ListCount { expected: usize, found: usize },
    #[error("item {item_id:?} appears twice in the list of model {model_index}")]
    DuplicateHit { item_id: String, model_index: usize },
    #[error("item {0:?} is not in the corpus")]
    UnknownItem(String),
    #[error("{labels} cluster labels for {points} pool points")]
    LabelMismatch { labels: usize, points: usize },
    #[error("N must be positive")]
    ZeroN,
}

/// Weight of the model at ensemble index `n`: `0.1 · 2^n`.
pub fn epoch_weight(n: usize) -> f64 {
    0.1 * 2f64.powi(n as i32)
}

/// Epoch-weighted vote over the models an item occurs in.
///
/// Summation runs in ascending model index.
pub fn weighted_score(occurrence: &[bool]) -> f64 {
    occurrence
        .iter()
        .enumerate()
        .filter(|&(_, &hit)| hit)
        .fold(0.0, |acc, (n, _)| acc + epoch_weight(n))
}

/// Sort key applied to the images gathered from the head clusters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// Frequency, then weighted score.
    #[default]
    FreqThenWs,
    /// Weighted score alone.
    WsOnly,
    /// Product of frequency and weighted score.
    FreqTimesWs,
}

impl Comparator {
    pub const ALL: [Comparator; 3] = [Comparator::FreqThenWs, Comparator::WsOnly, Comparator::FreqTimesWs];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::FreqThenWs => "freq_then_ws",
            Comparator::WsOnly => "ws_only",
            Comparator::FreqTimesWs => "freq_times_ws",
        }
    }

    /// Orders `a` before `b` when it ranks higher. Ties fall through to best
    /// similarity (descending) and then item id (ascending).
    pub fn compare(self, a: &CandidateEntry, b: &CandidateEntry) -> Ordering {
        let primary = match self {
            Comparator::FreqThenWs => b
                .frequency
                .cmp(&a.frequency)
                .then_with(|| b.weighted_score.total_cmp(&a.weighted_score)),
            Comparator::WsOnly => b.weighted_score.total_cmp(&a.weighted_score),
            Comparator::FreqTimesWs => {
                let pa = a.frequency as f64 * a.weighted_score;
                let pb = b.frequency as f64 * b.weighted_score;
                pb.total_cmp(&pa)
            }
        };
        primary
            .then_with(|| b.best_similarity.total_cmp(&a.best_similarity))
            .then_with(|| a.item_id.cmp(&b.item_id))
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Comparator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Comparator::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown comparator {s:?} (expected freq_then_ws, ws_only or freq_times_ws)"))
    }
}

/// One distinct image of the pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateEntry {
    pub item_id: String,
    pub occurrence: Vec<bool>,
    pub frequency: usize,
    pub weighted_score: f64,
    pub best_similarity: f64,
    /// Indices into [`CandidatePool::points`], one per occurring model.
    pub points: Vec<usize>,
}

/// A (model, image) pair in the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolPoint {
    pub item_id: String,
    pub model_index: usize,
    pub similarity: f64,
    /// Index into [`CandidatePool::entries`].
    #[serde(skip)]
    pub entry: usize,
}

/// Union of all per-model hit lists.
///
/// Points are ordered by model index, then by rank within the model's list;
/// entries are ordered by first appearance in that scan.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    z: usize,
    entries: Vec<CandidateEntry>,
    points: Vec<PoolPoint>,
    index: HashMap<String, usize>,
}

impl CandidatePool {
    /// Pools hit lists without consulting a corpus. `lists[n]` is model `n`'s
    /// list; the `model_index` stored on each hit is ignored in favour of the
    /// list position.
    pub fn from_hit_lists(lists: &[Vec<RetrievalHit>], z: usize) -> Result<Self, RankError> {
        if lists.len() != z {
            return Err(RankError::ListCount {
                expected: z,
                found: lists.len(),
            });
        }
        let mut entries: Vec<CandidateEntry> = Vec::new();
        let mut points = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (n, list) in lists.iter().enumerate() {
            for hit in list {
                let e = *index.entry(hit.item_id.clone()).or_insert_with(|| {
                    entries.push(CandidateEntry {
                        item_id: hit.item_id.clone(),
                        occurrence: vec![false; z],
                        frequency: 0,
                        weighted_score: 0.0,
                        best_similarity: f64::NEG_INFINITY,
                        points: Vec::new(),
                    });
                    entries.len() - 1
                });
                let entry = &mut entries[e];
                if entry.occurrence[n] {
                    return Err(RankError::DuplicateHit {
                        item_id: hit.item_id.clone(),
                        model_index: n,
                    });
                }
                entry.occurrence[n] = true;
                entry.frequency += 1;
                if hit.similarity > entry.best_similarity {
                    entry.best_similarity = hit.similarity;
                }
                entry.points.push(points.len());
                points.push(PoolPoint {
                    item_id: hit.item_id.clone(),
                    model_index: n,
                    similarity: hit.similarity,
                    entry: e,
                });
            }
        }
        if entries.is_empty() {
            return Err(RankError::EmptyPool);
        }
        for entry in &mut entries {
            entry.weighted_score = weighted_score(&entry.occurrence);
        }
        Ok(Self {
            z,
            entries,
            points,
            index,
        })
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn entries(&self) -> &[CandidateEntry] {
        &self.entries
    }

    pub fn points(&self) -> &[PoolPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&CandidateEntry> {
        self.index.get(item_id).map(|&i| &self.entries[i])
    }

    /// Gathers each point's embedding under its own model, row-major
    /// (`points().len() × set.dim()`).
    pub fn point_matrix(&self, set: &ModelSet) -> Result<Vec<f64>, RankError> {
        let mut out = Vec::with_capacity(self.points.len() * set.dim());
        for p in &self.points {
            let v = set
                .model(p.model_index)
                .vector_of(&p.item_id)
                .ok_or_else(|| RankError::UnknownItem(p.item_id.clone()))?;
            out.extend(v.iter().map(|&x| f64::from(x)));
        }
        Ok(out)
    }
}

/// Pools the per-model lists of `set`, checking every hit against the corpus.
pub fn build_candidate_pool(lists: &[Vec<RetrievalHit>], set: &ModelSet) -> Result<CandidatePool, RankError> {
    if let Some(hit) = lists.iter().flatten().find(|h| !set.contains_item(&h.item_id)) {
        return Err(RankError::UnknownItem(hit.item_id.clone()));
    }
    CandidatePool::from_hit_lists(lists, set.z())
}

fn head_order(pool: &CandidatePool) -> Vec<usize> {
    let mut heads: Vec<usize> = (0..pool.entries.len()).collect();
    heads.sort_by(|&a, &b| Comparator::FreqThenWs.compare(&pool.entries[a], &pool.entries[b]));
    heads
}

/// Every pool image, most frequent first.
pub fn select_heads(pool: &CandidatePool) -> Vec<String> {
    head_order(pool)
        .into_iter()
        .map(|e| pool.entries[e].item_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedItem {
    pub item_id: String,
    pub frequency: usize,
    pub weighted_score: f64,
    pub best_similarity: f64,
    pub occurrence: Vec<bool>,
}

/// Projection and clustering details for one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub points: Vec<PoolPoint>,
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub silhouette: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub items: Vec<RankedItem>,
    /// Heads consumed by the selection loop, in order.
    pub head_sequence: Vec<String>,
    /// Cluster ids treated as head clusters for each consumed head.
    pub head_clusters: Vec<Vec<usize>>,
    /// True when fewer than the requested number of items could be selected.
    pub short: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl RankedResult {
    pub fn item_ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.item_id.as_str()).collect()
    }
}

/// Selects and orders up to `n` images.
///
/// `labels[p]` is the cluster of `pool.points()[p]`. Heads are consumed in
/// order; for each head the clusters holding any of its points are gathered,
/// their images sorted by `comparator`, and the unseen ones appended. The
/// loop stops once `n` images are selected or the heads run out.
pub fn enclip_rank(
    pool: &CandidatePool,
    labels: &[usize],
    n: usize,
    comparator: Comparator,
) -> Result<RankedResult, RankError> {
    if labels.len() != pool.points.len() {
        return Err(RankError::LabelMismatch {
            labels: labels.len(),
            points: pool.points.len(),
        });
    }
    if n == 0 {
        return Err(RankError::ZeroN);
    }
    let num_clusters = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (p, &c) in labels.iter().enumerate() {
        let e = pool.points[p].entry;
        if members[c].last() != Some(&e) && !members[c].contains(&e) {
            members[c].push(e);
        }
    }

    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut taken = vec![false; pool.entries.len()];
    let mut head_sequence = Vec::new();
    let mut head_clusters = Vec::new();

    for head in head_order(pool) {
        if selected.len() >= n {
            break;
        }
        let mut clusters: Vec<usize> = pool.entries[head].points.iter().map(|&p| labels[p]).collect();
        clusters.sort_unstable();
        clusters.dedup();

        let mut gathered = vec![false; pool.entries.len()];
        for &c in &clusters {
            for &e in &members[c] {
                gathered[e] = true;
            }
        }
        let mut batch: Vec<usize> = (0..pool.entries.len()).filter(|&e| gathered[e]).collect();
        batch.sort_by(|&a, &b| comparator.compare(&pool.entries[a], &pool.entries[b]));
        for e in batch {
            if !taken[e] {
                taken[e] = true;
                selected.push(e);
            }
        }
        head_sequence.push(pool.entries[head].item_id.clone());
        head_clusters.push(clusters);
    }

    selected.truncate(n);
    let items = selected
        .iter()
        .map(|&e| {
            let entry = &pool.entries[e];
            RankedItem {
                item_id: entry.item_id.clone(),
                frequency: entry.frequency,
                weighted_score: entry.weighted_score,
                best_similarity: entry.best_similarity,
                occurrence: entry.occurrence.clone(),
            }
        })
        .collect::<Vec<_>>();
    Ok(RankedResult {
        short: items.len() < n,
        items,
        head_sequence,
        head_clusters,
        diagnostics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn hits(lists: &[&[&str]]) -> Vec<Vec<RetrievalHit>> {
        lists
            .iter()
            .enumerate()
            .map(|(n, list)| {
                list.iter()
                    .enumerate()
                    .map(|(r, id)| RetrievalHit {
                        item_id: id.to_string(),
                        model_index: n,
                        similarity: 0.9 - 0.1 * r as f64,
                        rank: r + 1,
                    })
                    .collect()
            })
            .collect()
    }

    fn three_model_pool() -> CandidatePool {
        CandidatePool::from_hit_lists(&hits(&[&["A", "B", "C"], &["B", "C", "D"], &["C", "D", "E"]]), 3).unwrap()
    }

    #[test]
    fn weighted_score_values() {
        assert_eq!(weighted_score(&[false; 5]), 0.0);
        assert!(weighted_score(&[false; 5]).is_sign_positive());
        assert_eq!(weighted_score(&[false, false, false, false, true]), 0.1 * 16.0);
        assert!((weighted_score(&[false, false, false, false, true]) - 1.6).abs() < 1e-15);
        let a = weighted_score(&[true, false]);
        let b = weighted_score(&[false, true]);
        assert_eq!((a, b), (0.1, 0.2));
        assert_eq!(b, 2.0 * a);
        assert!((weighted_score(&[true; 5]) - 3.1).abs() < 1e-12);
    }

    #[test]
    fn pool_frequencies_and_scores() {
        let pool = three_model_pool();
        let expect = [("A", 1, 0.1), ("B", 2, 0.3), ("C", 3, 0.7), ("D", 2, 0.6), ("E", 1, 0.4)];
        for (id, f, ws) in expect {
            let e = pool.get(id).unwrap();
            assert_eq!(e.frequency, f, "{id}");
            assert_eq!(e.points.len(), f);
            assert!((e.weighted_score - ws).abs() < 1e-12, "{id}: {}", e.weighted_score);
        }
        assert_eq!(pool.points().len(), 9);
        assert_eq!(pool.get("C").unwrap().best_similarity, 0.9);
    }

    #[test]
    fn pool_single_model() {
        let pool = CandidatePool::from_hit_lists(&hits(&[&["A"]]), 1).unwrap();
        let a = pool.get("A").unwrap();
        assert_eq!((a.frequency, a.weighted_score), (1, 0.1));
    }

    #[test]
    fn pool_errors() {
        assert_eq!(
            CandidatePool::from_hit_lists(&hits(&[&[], &[]]), 2).unwrap_err(),
            RankError::EmptyPool
        );
        assert!(matches!(
            CandidatePool::from_hit_lists(&hits(&[&["A", "A"]]), 1),
            Err(RankError::DuplicateHit { .. })
        ));
        assert!(matches!(
            CandidatePool::from_hit_lists(&hits(&[&["A"]]), 2),
            Err(RankError::ListCount { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn heads_follow_frequency_then_score() {
        assert_eq!(select_heads(&three_model_pool()), ["C", "D", "B", "E", "A"]);
        let tied = CandidatePool::from_hit_lists(
            &[vec![
                RetrievalHit { item_id: "q".into(), model_index: 0, similarity: 0.5, rank: 1 },
                RetrievalHit { item_id: "b".into(), model_index: 0, similarity: 0.5, rank: 2 },
                RetrievalHit { item_id: "k".into(), model_index: 0, similarity: 0.5, rank: 3 },
            ]],
            1,
        )
        .unwrap();
        assert_eq!(select_heads(&tied), ["b", "k", "q"]);
        let single = CandidatePool::from_hit_lists(&hits(&[&["x"]]), 1).unwrap();
        assert_eq!(select_heads(&single), ["x"]);
    }

    fn worked_labels(pool: &CandidatePool) -> Vec<usize> {
        pool.points()
            .iter()
            .map(|p| if matches!(p.item_id.as_str(), "A" | "B") { 1 } else { 0 })
            .collect()
    }

    #[test]
    fn rank_worked_example() {
        let pool = three_model_pool();
        let labels = worked_labels(&pool);
        let r = enclip_rank(&pool, &labels, 4, Comparator::FreqThenWs).unwrap();
        assert_eq!(r.item_ids(), ["C", "D", "E", "B"]);
        assert_eq!(r.head_sequence, ["C", "D", "B"]);
        assert_eq!(r.head_clusters, [vec![0], vec![0], vec![1]]);
        assert!(!r.short);

        let r = enclip_rank(&pool, &labels, 1, Comparator::FreqThenWs).unwrap();
        assert_eq!(r.item_ids(), ["C"]);
        assert_eq!(r.head_sequence, ["C"]);

        let r = enclip_rank(&pool, &labels, 10, Comparator::FreqThenWs).unwrap();
        assert_eq!(r.item_ids(), ["C", "D", "E", "B", "A"]);
        assert!(r.short);
    }

    #[test]
    fn rank_single_model_single_cluster_is_similarity_order() {
        let pool = CandidatePool::from_hit_lists(&hits(&[&["m", "a", "z", "c"]]), 1).unwrap();
        let r = enclip_rank(&pool, &[0; 4], 10, Comparator::FreqThenWs).unwrap();
        assert_eq!(r.item_ids(), ["m", "a", "z", "c"]);
    }

    #[test]
    fn head_in_several_clusters_pulls_all_of_them() {
        // C's three points land in three different clusters
        let pool = three_model_pool();
        let labels: Vec<usize> = pool
            .points()
            .iter()
            .map(|p| match (p.item_id.as_str(), p.model_index) {
                ("C", n) => n,
                ("A", _) | ("B", _) => 0,
                ("D", _) => 1,
                _ => 2,
            })
            .collect();
        let r = enclip_rank(&pool, &labels, 5, Comparator::FreqThenWs).unwrap();
        assert_eq!(r.head_clusters[0], [0, 1, 2]);
        assert_eq!(r.item_ids(), ["C", "D", "B", "E", "A"]);
    }

    #[test]
    fn comparator_variants_differ() {
        // F: models 0..=2 (f3, ws 0.7); G: model 3 only (f1, ws 0.8)
        let pool = CandidatePool::from_hit_lists(&hits(&[&["F"], &["F"], &["F"], &["G"]]), 4).unwrap();
        let labels = vec![0; pool.points().len()];
        let order = |c| enclip_rank(&pool, &labels, 2, c).unwrap().item_ids().join("");
        assert_eq!(order(Comparator::FreqThenWs), "FG");
        assert_eq!(order(Comparator::WsOnly), "GF");
        assert_eq!(order(Comparator::FreqTimesWs), "FG");
        assert_eq!("ws_only".parse::<Comparator>().unwrap(), Comparator::WsOnly);
        assert!("bogus".parse::<Comparator>().is_err());
    }

    #[test]
    fn rank_errors() {
        let pool = three_model_pool();
        assert!(matches!(
            enclip_rank(&pool, &[0; 3], 2, Comparator::FreqThenWs),
            Err(RankError::LabelMismatch { labels: 3, points: 9 })
        ));
        assert_eq!(
            enclip_rank(&pool, &[0; 9], 0, Comparator::FreqThenWs).unwrap_err(),
            RankError::ZeroN
        );
    }
}
