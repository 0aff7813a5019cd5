//! K-means over the 2-D projection, with silhouette-driven choice of K.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_K_MIN: usize = 4;
pub const DEFAULT_K_MAX: usize = 6;

const MAX_ITERS: usize = 300;
const CONVERGENCE: f64 = 1e-6;
const RESTARTS: usize = 10;
const SILHOUETTE_TIE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("K = {k} is outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("silhouette needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("{labels} labels for {points} points")]
    LabelMismatch { labels: usize, points: usize },
    #[error("k_min {k_min} exceeds k_max {k_max}")]
    BadRange { k_min: usize, k_max: usize },
    #[error("Lloyd inertia increased from {before} to {after} at iteration {iteration}")]
    NonMonotone { iteration: usize, before: f64, after: f64 },
    #[error("non-finite point at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    /// Cluster of each point; ids are numbered by first occurrence.
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub inertia: f64,
    pub k: usize,
    /// Mean silhouette; 0.0 where undefined (K = 1 or fewer than 3 points).
    pub silhouette: f64,
    pub seed: u64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, &cen) in centroids.iter().enumerate() {
        let d = dist2(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

struct Run {
    labels: Vec<usize>,
    centroids: Vec<[f64; 2]>,
    inertia: f64,
    trace: Vec<f64>,
}

fn inertia_of(points: &[[f64; 2]], labels: &[usize], centroids: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(&p, &l)| dist2(p, centroids[l]))
        .sum()
}

/// Assigns every point to its nearest centroid; an empty cluster takes the
/// point farthest from its centroid (from a cluster with a spare member).
fn assign(points: &[[f64; 2]], centroids: &mut [[f64; 2]], labels: &mut [usize]) -> Vec<usize> {
    let k = centroids.len();
    for (l, &p) in labels.iter_mut().zip(points) {
        *l = nearest(p, centroids).0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                dist2(points[a], centroids[labels[a]])
                    .total_cmp(&dist2(points[b], centroids[labels[b]]))
                    .then(b.cmp(&a))
            })
            .expect("k <= n leaves a cluster with a spare point");
        counts[labels[far]] -= 1;
        labels[far] = c;
        counts[c] = 1;
        centroids[c] = points[far];
    }
    counts
}

fn lloyd(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Result<Run, ClusterError> {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels = vec![0; points.len()];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for iteration in 0..=MAX_ITERS {
        let counts = assign(points, &mut centroids, &mut labels);
        let inertia = inertia_of(points, &labels, &centroids);
        if let Some(&before) = trace.last() {
            if inertia > before * (1.0 + 1e-12) + 1e-12 {
                return Err(ClusterError::NonMonotone {
                    iteration,
                    before,
                    after: inertia,
                });
            }
        }
        trace.push(inertia);
        if converged || iteration == MAX_ITERS {
            break;
        }

        let mut sums = vec![[0.0f64; 2]; k];
        for (&p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let next = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            shift = shift.max(dist2(next, centroids[c]).sqrt());
            centroids[c] = next;
        }
        converged = shift < CONVERGENCE;
    }
    let inertia = *trace.last().expect("at least one iteration");
    Ok(Run {
        labels,
        centroids,
        inertia,
        trace,
    })
}

/// Renumbers clusters in order of first appearance.
fn canonicalize(labels: &mut [usize], centroids: &mut Vec<[f64; 2]>) {
    let k = centroids.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
    let mut reordered = vec![[0.0; 2]; k];
    for (old, &new) in map.iter().enumerate() {
        if new != usize::MAX {
            reordered[new] = centroids[old];
        }
    }
    *centroids = reordered;
}

/// k-means++ seeded Lloyd iterations, best of ten restarts.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<ClusterAssignment, ClusterError> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(ClusterError::BadK { k, n });
    }
    if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(ClusterError::NonFinite(i));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());
        let run = lloyd(points, k, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let Run {
        mut labels,
        mut centroids,
        inertia,
        trace,
    } = best.expect("at least one restart");
    canonicalize(&mut labels, &mut centroids);
    let silhouette = if k >= 2 && n >= 3 {
        silhouette(points, &labels)?
    } else {
        0.0
    };
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
        k,
        silhouette,
        seed,
        inertia_trace: trace,
    })
}

/// Mean silhouette coefficient (Euclidean). Singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64, ClusterError> {
    let n = points.len();
    if labels.len() != n {
        return Err(ClusterError::LabelMismatch {
            labels: labels.len(),
            points: n,
        });
    }
    if n < 3 {
        return Err(ClusterError::TooFewPoints(n));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let mut sums = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        sums.fill(0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(points[i], points[j]).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette and inertia of one candidate K.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KCandidate {
    pub k: usize,
    pub silhouette: f64,
    pub inertia: f64,
    /// Relative inertia drop from K-1 to K; `None` when K-1 was not fitted.
    pub inertia_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSelection {
    pub k: usize,
    pub assignment: ClusterAssignment,
    pub candidates: Vec<KCandidate>,
    pub warnings: Vec<String>,
}

/// Fits every K in `k_min..=k_max` and keeps the best silhouette.
///
/// Silhouette ties go to the larger relative inertia drop, then the smaller
/// K. With fewer points than `k_min` the fit falls back to K = N; a `k_max`
/// above N is lowered to N.
pub fn select_k(points: &[[f64; 2]], k_min: usize, k_max: usize, seed: u64) -> Result<KSelection, ClusterError> {
    if k_min > k_max {
        return Err(ClusterError::BadRange { k_min, k_max });
    }
    let n = points.len();
    let mut warnings = Vec::new();
    if n < k_min.max(1) {
        let k = n.max(1);
        warnings.push(format!("only {n} points; clamped K to {k} (requested {k_min}..={k_max})"));
        let assignment = kmeans(points, k, seed)?;
        return Ok(KSelection {
            k,
            candidates: vec![KCandidate {
                k,
                silhouette: assignment.silhouette,
                inertia: assignment.inertia,
                inertia_drop: None,
            }],
            assignment,
            warnings,
        });
    }
    let k_min = k_min.max(1);
    let k_hi = k_max.min(n);
    if k_hi < k_max {
        warnings.push(format!("only {n} points; K range capped at {k_hi}"));
    }

    let mut prev_inertia = if k_min >= 2 {
        Some(kmeans(points, k_min - 1, seed)?.inertia)
    } else {
        None
    };
    let mut candidates = Vec::new();
    let mut fits = Vec::new();
    for k in k_min..=k_hi {
        let fit = kmeans(points, k, seed)?;
        let drop = prev_inertia.map(|p| if p > 0.0 { (p - fit.inertia) / p } else { 0.0 });
        prev_inertia = Some(fit.inertia);
        candidates.push(KCandidate {
            k,
            silhouette: fit.silhouette,
            inertia: fit.inertia,
            inertia_drop: drop,
        });
        fits.push(fit);
    }

    let mut best = 0;
    for i in 1..candidates.len() {
        let (c, b) = (&candidates[i], &candidates[best]);
        let better = if (c.silhouette - b.silhouette).abs() > SILHOUETTE_TIE {
            c.silhouette > b.silhouette
        } else {
            c.inertia_drop.unwrap_or(0.0) > b.inertia_drop.unwrap_or(0.0) + SILHOUETTE_TIE
        };
        if better {
            best = i;
        }
    }
    let assignment = fits.swap_remove(best);
    Ok(KSelection {
        k: assignment.k,
        assignment,
        candidates,
        warnings,
    })
}
