//! Exact t-SNE to two dimensions.
//!
//! The pooled candidate set holds at most a few hundred points per query, so
//! the O(N²) formulation is used directly. Runs are fully determined by the
//! input and [`TsneParams::seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DimredError {
    #[error("no input points")]
    Empty,
    #[error("point buffer of {len} values is not a multiple of dim {dim}")]
    Shape { len: usize, dim: usize },
    #[error("non-finite input value at point {0}")]
    NonFinite(usize),
    #[error("optimisation diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("trustworthiness needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("neighbourhood size {k} must satisfy 1 <= k < {n}/2")]
    BadNeighbourhood { k: usize, n: usize },
    #[error("high and low point sets differ in size ({high} vs {low})")]
    CountMismatch { high: usize, low: usize },
}

const EXAGGERATION_ITERS: usize = 250;
const PERPLEXITY_SEARCH_STEPS: usize = 50;
const PERPLEXITY_TOLERANCE: f64 = 1e-5;
const INIT_SCALE: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;
const KL_EVERY: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Perplexity actually used for `n` points.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        let cap = (n.saturating_sub(1) / 3).max(2) as f64;
        self.perplexity.min(cap).max(2.0)
    }

    fn validate(&self) -> Result<(), DimredError> {
        if self.iterations < 50 {
            return Err(DimredError::Params("iterations must be at least 50".into()));
        }
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return Err(DimredError::Params("perplexity must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DimredError::Params("learning rate must be positive".into()));
        }
        if !(self.early_exaggeration.is_finite() && self.early_exaggeration >= 1.0) {
            return Err(DimredError::Params("early exaggeration must be >= 1".into()));
        }
        Ok(())
    }
}

/// 2-D embedding, index-aligned with the input rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) after the last iteration.
    pub kl_divergence: f64,
    /// (iteration, KL) samples taken every few iterations.
    pub kl_trace: Vec<(usize, f64)>,
}

fn squared_distances(points: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let a = &points[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let b = &points[j * dim..(j + 1) * dim];
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities p(j|i) with per-row bandwidth matched to
/// `perplexity` by bisection on the Gaussian precision.
fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        // shift by the nearest neighbour distance so exp() cannot underflow to all zeros
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let mut beta = 1.0;
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut ok = false;
        for _ in 0..PERPLEXITY_SEARCH_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - dmin) * row[j];
            }
            if !(sum > 0.0 && sum.is_finite()) {
                ok = false;
                break;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in row.iter_mut() {
                *v /= sum;
            }
            ok = true;
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        if !ok || row.iter().any(|v| !v.is_finite()) {
            let u = 1.0 / (n - 1) as f64;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == i { 0.0 } else { u };
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    p
}

fn joint_affinities(points: &[f64], n: usize, dim: usize, perplexity: f64) -> Vec<f64> {
    let dist = squared_distances(points, n, dim);
    let cond = conditional_affinities(&dist, n, perplexity);
    let mut p = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / norm).max(1e-12);
            }
        }
    }
    p
}

fn kl_divergence(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| {
            let qij = (nij / z).max(1e-12);
            pij * (pij / qij).ln()
        })
        .sum()
}

/// Embeds `points` (row-major, `points.len() / dim` rows) into the plane.
///
/// A single point maps to the origin.
pub fn tsne_2d(points: &[f64], dim: usize, params: &TsneParams) -> Result<Projection2D, DimredError> {
    params.validate()?;
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(DimredError::Shape { len: points.len(), dim });
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(DimredError::Empty);
    }
    if let Some(pos) = points.iter().position(|x| !x.is_finite()) {
        return Err(DimredError::NonFinite(pos / dim));
    }
    if n == 1 {
        return Ok(Projection2D {
            coords: vec![[0.0, 0.0]],
            kl_divergence: 0.0,
            kl_trace: Vec::new(),
        });
    }

    let p = joint_affinities(points, n, dim, params.effective_perplexity(n));

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut kl_trace = Vec::new();
    let mut last_kl = 0.0;

    for iter in 0..params.iterations {
        let exaggerating = iter < EXAGGERATION_ITERS;
        let exaggeration = if exaggerating { params.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating {
            params.initial_momentum
        } else {
            params.final_momentum
        };

        let mut z = 0.0;
        for i in 0..n {
            num[i * n + i] = 0.0;
            for j in (i + 1)..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }

        grad.fill(0.0);
        let inv_z = 1.0 / z;
        for i in 0..n {
            for j in (i + 1)..n {
                let q = num[i * n + j];
                let mult = 4.0 * (exaggeration * p[i * n + j] - q * inv_z) * q;
                let fx = mult * (y[2 * i] - y[2 * j]);
                let fy = mult * (y[2 * i + 1] - y[2 * j + 1]);
                grad[2 * i] += fx;
                grad[2 * i + 1] += fy;
                grad[2 * j] -= fx;
                grad[2 * j + 1] -= fy;
            }
        }

        for d in 0..2 * n {
            gains[d] = if (grad[d] > 0.0) != (update[d] > 0.0) {
                gains[d] + 0.2
            } else {
                (gains[d] * 0.8).max(MIN_GAIN)
            };
            update[d] = momentum * update[d] - params.learning_rate * gains[d] * grad[d];
            y[d] += update[d];
        }

        let (mx, my) = (0..n).fold((0.0, 0.0), |(sx, sy), i| (sx + y[2 * i], sy + y[2 * i + 1]));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for i in 0..n {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }

        if y.iter().any(|v| !v.is_finite()) {
            return Err(DimredError::Diverged(iter));
        }

        let last = iter + 1 == params.iterations;
        if last || (iter + 1) % KL_EVERY == 0 {
            // KL against the un-exaggerated target, from this iteration's Q
            last_kl = kl_divergence(&p, &num, z);
            kl_trace.push((iter + 1, last_kl));
        }
    }

    Ok(Projection2D {
        coords: y.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        kl_divergence: last_kl,
        kl_trace,
    })
}

/// Neighbourhood-preservation score of a low-dimensional embedding.
///
/// Penalises points that are among the `k` nearest neighbours in `low` but
/// not in `high`, by how far outside the high-dimensional neighbourhood they
/// rank. 1.0 means every low-dimensional neighbourhood is a true one.
pub fn trustworthiness(
    high: &[f64],
    high_dim: usize,
    low: &[f64],
    low_dim: usize,
    k: usize,
) -> Result<f64, DimredError> {
    if high_dim == 0 || !high.len().is_multiple_of(high_dim) {
        return Err(DimredError::Shape { len: high.len(), dim: high_dim });
    }
    if low_dim == 0 || !low.len().is_multiple_of(low_dim) {
        return Err(DimredError::Shape { len: low.len(), dim: low_dim });
    }
    let n = high.len() / high_dim;
    if low.len() / low_dim != n {
        return Err(DimredError::CountMismatch {
            high: n,
            low: low.len() / low_dim,
        });
    }
    if n < 4 {
        return Err(DimredError::TooFewPoints(n));
    }
    if k < 1 || 2 * k >= n {
        return Err(DimredError::BadNeighbourhood { k, n });
    }

    let dh = squared_distances(high, n, high_dim);
    let dl = squared_distances(low, n, low_dim);
    let mut penalty = 0usize;
    let mut rank_of = vec![0usize; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dh[i * n + a].total_cmp(&dh[i * n + b]).then(a.cmp(&b)));
        for (r, &j) in order.iter().enumerate() {
            rank_of[j] = r + 1;
        }
        order.sort_by(|&a, &b| dl[i * n + a].total_cmp(&dl[i * n + b]).then(a.cmp(&b)));
        penalty += order[..k]
            .iter()
            .map(|&j| rank_of[j].saturating_sub(k))
            .sum::<usize>();
    }
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TsneParams {
        TsneParams {
            iterations: 300,
            ..TsneParams::default()
        }
    }

    #[test]
    fn single_point_sits_at_origin() {
        let out = tsne_2d(&[1.0, 2.0, 3.0], 3, &quick()).unwrap();
        assert_eq!(out.coords, [[0.0, 0.0]]);
    }

    #[test]
    fn identical_points_stay_finite() {
        let pts = vec![0.5; 20 * 4];
        let out = tsne_2d(&pts, 4, &quick()).unwrap();
        assert_eq!(out.coords.len(), 20);
        assert!(out.coords.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn two_points_are_fine() {
        let out = tsne_2d(&[0.0, 0.0, 1.0, 1.0], 2, &quick()).unwrap();
        assert!(out.coords.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(tsne_2d(&[], 2, &quick()), Err(DimredError::Empty));
        assert_eq!(tsne_2d(&[0.0, f64::NAN], 1, &quick()), Err(DimredError::NonFinite(1)));
        assert!(matches!(tsne_2d(&[0.0; 3], 2, &quick()), Err(DimredError::Shape { .. })));
        let bad = TsneParams {
            iterations: 10,
            ..TsneParams::default()
        };
        assert!(matches!(tsne_2d(&[0.0; 4], 2, &bad), Err(DimredError::Params(_))));
    }

    #[test]
    fn perplexity_clamp() {
        let p = TsneParams::default();
        assert_eq!(p.effective_perplexity(2), 2.0);
        assert_eq!(p.effective_perplexity(31), 10.0);
        assert_eq!(p.effective_perplexity(1000), 30.0);
    }

    #[test]
    fn affinity_rows_hit_target_perplexity() {
        let pts: Vec<f64> = (0..40).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let dist = squared_distances(&pts, 40, 1);
        let p = conditional_affinities(&dist, 40, 5.0);
        for i in 0..40 {
            let row = &p[i * 40..(i + 1) * 40];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h.exp() - 5.0).abs() < 1e-3, "row {i}: perplexity {}", h.exp());
        }
    }

    #[test]
    fn centred_and_deterministic() {
        let pts: Vec<f64> = (0..60 * 5).map(|i| ((i * 31 % 17) as f64).sin()).collect();
        let a = tsne_2d(&pts, 5, &quick().with_seed(9)).unwrap();
        let b = tsne_2d(&pts, 5, &quick().with_seed(9)).unwrap();
        assert_eq!(a, b);
        let (sx, sy) = a.coords.iter().fold((0.0, 0.0), |(x, y), c| (x + c[0], y + c[1]));
        assert!((sx / 60.0).abs() < 1e-6 && (sy / 60.0).abs() < 1e-6);
    }

    #[test]
    fn trustworthiness_of_isometry_is_one() {
        let high: Vec<f64> = (0..30).flat_map(|i| [i as f64 * 0.7, ((i * i) % 13) as f64]).collect();
        let (s, c) = (0.6f64.sin(), 0.6f64.cos());
        let low: Vec<f64> = high
            .chunks_exact(2)
            .flat_map(|p| [c * p[0] - s * p[1] + 5.0, s * p[0] + c * p[1] - 2.0])
            .collect();
        let t = trustworthiness(&high, 2, &low, 2, 5).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trustworthiness_minimal_case() {
        let pts = [0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
        assert_eq!(trustworthiness(&pts, 2, &pts, 2, 1).unwrap(), 1.0);
    }

    #[test]
    fn trustworthiness_errors() {
        let pts = [0.0; 6];
        assert_eq!(trustworthiness(&pts, 2, &pts, 2, 1), Err(DimredError::TooFewPoints(3)));
        let pts = [0.0; 8];
        assert!(matches!(
            trustworthiness(&pts, 2, &pts, 2, 2),
            Err(DimredError::BadNeighbourhood { .. })
        ));
        assert!(matches!(
            trustworthiness(&pts, 2, &pts[..6], 2, 1),
            Err(DimredError::CountMismatch { .. })
        ));
    }
}
