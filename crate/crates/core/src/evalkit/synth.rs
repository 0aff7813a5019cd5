//! Planted multi-checkpoint fixture.
//!
//! Items belong to ground-truth groups. Every pseudo-checkpoint sees the same
//! group structure plus its own noise, and each one is blind to a disjoint
//! slice of every group: those items are embedded next to a different,
//! randomly chosen group. A single checkpoint therefore both misses some
//! relevant items and returns some wrong ones, while the union of all
//! checkpoints covers every group and the wrong items rarely recur across
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_qrels, write_queries, EvalError, QueryRecord, RelevanceJudgment};
use crate::corpus::{write_store, EmbeddingMatrix, STORE_EXTENSION};

const BASE_EPOCHS: [u32; 5] = [10, 30, 50, 80, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub items: usize,
    pub groups: usize,
    pub models: usize,
    pub dim: usize,
    pub queries_per_group: usize,
    /// Spread of items around their group centre (shared by all models).
    pub item_noise: f64,
    /// Independent per-model perturbation of every item and query.
    pub model_noise: f64,
    /// Spread of queries around their group centre.
    pub query_noise: f64,
    /// Fraction of each group a model is blind to (capped at 1/models).
    pub blind_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            items: 2000,
            groups: 20,
            models: 5,
            dim: 64,
            queries_per_group: 5,
            item_noise: 0.6,
            model_noise: 0.3,
            query_noise: 0.3,
            blind_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.to_string()));
        if self.models == 0 || self.groups == 0 || self.dim == 0 {
            return bad("models, groups and dim must be positive");
        }
        if self.items < self.groups {
            return bad("need at least one item per group");
        }
        if self.queries_per_group == 0 {
            return bad("queries_per_group must be positive");
        }
        let finite = [self.item_noise, self.model_noise, self.query_noise, self.blind_fraction];
        if finite.iter().any(|x| !x.is_finite() || *x < 0.0) || self.blind_fraction > 1.0 {
            return bad("noise levels must be finite and non-negative; blind_fraction in [0, 1]");
        }
        Ok(())
    }

    /// Per-model blind fraction actually applied.
    pub fn effective_blind_fraction(&self) -> f64 {
        if self.models < 2 || self.groups < 2 {
            0.0
        } else {
            self.blind_fraction.min(1.0 / self.models as f64)
        }
    }

    pub fn epoch_of(model: usize) -> u32 {
        BASE_EPOCHS
            .get(model)
            .copied()
            .unwrap_or_else(|| BASE_EPOCHS[4] + 20 * (model - 4) as u32)
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub stores: Vec<EmbeddingMatrix>,
    pub queries: Vec<QueryRecord>,
    pub qrels: Vec<RelevanceJudgment>,
    /// Group of every item, index-aligned with the store rows.
    pub groups: Vec<usize>,
    /// `blind[n]` lists the items model `n` mis-embeds.
    pub blind: Vec<BTreeSet<String>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn item_id(i: usize) -> String {
    format!("item{i:05}")
}

/// Generates the fixture. Store vectors are L2-normalized.
pub fn synth_fixture(seed: u64, spec: &SynthSpec) -> Result<SynthFixture, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g_count, z, dim) = (spec.groups, spec.models, spec.dim);

    let centres: Vec<Vec<f64>> = (0..g_count).map(|_| gaussian(&mut rng, dim, 1.0)).collect();
    let groups: Vec<usize> = (0..spec.items).map(|i| i % g_count).collect();
    let base: Vec<Vec<f64>> = groups
        .iter()
        .map(|&g| add(&centres[g], &gaussian(&mut rng, dim, spec.item_noise)))
        .collect();

    // disjoint blind slices per group
    let frac = spec.effective_blind_fraction();
    let mut blind_of: Vec<Option<usize>> = vec![None; spec.items];
    for g in 0..g_count {
        let mut members: Vec<usize> = (0..spec.items).filter(|&i| groups[i] == g).collect();
        members.shuffle(&mut rng);
        let slice = (members.len() as f64 * frac).floor() as usize;
        for n in 0..z {
            for &i in members.iter().skip(n * slice).take(slice) {
                blind_of[i] = Some(n);
            }
        }
    }
    let decoy: Vec<usize> = groups
        .iter()
        .map(|&g| {
            if g_count < 2 {
                return g;
            }
            let other = rng.random_range(0..g_count - 1);
            if other >= g {
                other + 1
            } else {
                other
            }
        })
        .collect();

    let mut stores = Vec::with_capacity(z);
    let mut blind = vec![BTreeSet::new(); z];
    for n in 0..z {
        let mut rows = Vec::with_capacity(spec.items);
        for i in 0..spec.items {
            let v = if blind_of[i] == Some(n) {
                blind[n].insert(item_id(i));
                add(&centres[decoy[i]], &gaussian(&mut rng, dim, spec.item_noise))
            } else {
                add(&base[i], &gaussian(&mut rng, dim, spec.model_noise))
            };
            rows.push((item_id(i), v.into_iter().map(|x| x as f32).collect()));
        }
        let epoch = SynthSpec::epoch_of(n);
        stores.push(
            EmbeddingMatrix::from_rows_normalized(format!("epoch{epoch}"), epoch, dim, rows)
                .map_err(|e| EvalError::Config(e.to_string()))?,
        );
    }

    let mut queries = Vec::new();
    let mut qrels = Vec::new();
    for g in 0..g_count {
        let relevant: BTreeSet<String> = (0..spec.items).filter(|&i| groups[i] == g).map(item_id).collect();
        for j in 0..spec.queries_per_group {
            let query_id = format!("g{g:02}-q{j}");
            let shared = add(&centres[g], &gaussian(&mut rng, dim, spec.query_noise));
            let vectors: BTreeMap<String, Vec<f32>> = stores
                .iter()
                .map(|m| {
                    let v = add(&shared, &gaussian(&mut rng, dim, spec.model_noise));
                    (m.model_id().to_string(), v.into_iter().map(|x| x as f32).collect())
                })
                .collect();
            queries.push(QueryRecord {
                query_id: query_id.clone(),
                text: None,
                vectors: Some(vectors),
                category: Some(format!("group{g:02}")),
            });
            qrels.push(RelevanceJudgment {
                query_id,
                relevant: relevant.clone(),
            });
        }
    }

    Ok(SynthFixture {
        stores,
        queries,
        qrels,
        groups,
        blind,
    })
}

/// Writes one store per model plus `queries.jsonl` and `qrels.jsonl`.
pub fn write_fixture(fixture: &SynthFixture, dir: &Path) -> Result<(), EvalError> {
    let io = |e: String| EvalError::Io {
        path: dir.to_path_buf(),
        message: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
    for m in &fixture.stores {
        let path = dir.join(format!("{}.{STORE_EXTENSION}", m.model_id()));
        write_store(m, &path).map_err(|e| io(e.to_string()))?;
    }
    write_queries(&dir.join("queries.jsonl"), &fixture.queries)?;
    write_qrels(&dir.join("qrels.jsonl"), &fixture.qrels)
}
