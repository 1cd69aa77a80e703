//! Size-matched negative subsets for single-image baselines.
//!
//! `Spatial` and `Coverage` are both distance-based subset selection over the
//! embedding space: farthest-point sampling started at the pool medoid, and
//! greedy k-center started at a uniformly random member. Distances are
//! Euclidean throughout.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SelectionError;
use crate::catalog::{Catalog, PoolFilter};
use crate::exec::{self, Execution};
use crate::hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMethod {
    Rand,
    Cluster,
    Spatial,
    Coverage,
    All,
}

impl SubsetMethod {
    pub fn needs_embeddings(self) -> bool {
        matches!(self, SubsetMethod::Cluster | SubsetMethod::Spatial | SubsetMethod::Coverage)
    }
}

impl fmt::Display for SubsetMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsetMethod::Rand => "rand",
            SubsetMethod::Cluster => "cluster",
            SubsetMethod::Spatial => "spatial",
            SubsetMethod::Coverage => "coverage",
            SubsetMethod::All => "all",
        })
    }
}

impl FromStr for SubsetMethod {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rand" | "random" => Ok(SubsetMethod::Rand),
            "cluster" => Ok(SubsetMethod::Cluster),
            "spatial" => Ok(SubsetMethod::Spatial),
            "coverage" => Ok(SubsetMethod::Coverage),
            "all" => Ok(SubsetMethod::All),
            other => Err(SelectionError::InvalidStrategy(format!("unknown subset method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSubset {
    pub method: SubsetMethod,
    pub ids: Vec<String>,
    pub target_size: usize,
    pub seed: u64,
}

const KMEANS_MAX_ITER: usize = 50;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

/// Lloyd's k-means with k-means++ seeding. Points are assigned to the lowest
/// index centroid on distance ties; empty clusters keep their centroid.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, exec: Execution) -> KMeansResult {
    assert!(k >= 1 && k <= points.len(), "need 1 <= k <= n");
    let mut rng = hash::rng_from_seed(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].to_vec());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already-covered point.
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut assignment = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        assignment = exec::map_slice(points, exec, |p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        });
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[j]).sqrt());
            centroids[j] = updated;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    KMeansResult { centroids, assignment, iterations }
}

/// Farthest-point traversal: starts at `start`, then repeatedly adds the point
/// whose distance to its nearest chosen point is largest (lowest index on ties).
pub fn farthest_point_order(points: &[&[f64]], start: usize, count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    let mut chosen = vec![false; points.len()];
    let mut order = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut next = start;
    while order.len() < count {
        chosen[next] = true;
        order.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, points[next]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        match best {
            Some((i, _)) => next = i,
            None => break,
        }
    }
    order
}

/// Index minimizing the summed Euclidean distance to all other points.
fn medoid(points: &[&[f64]], exec: Execution) -> usize {
    let totals = exec::map_indexed(points.len(), exec, |i| points.iter().map(|p| sq_dist(points[i], p).sqrt()).sum::<f64>());
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t < totals[best] {
            best = i;
        }
    }
    best
}

/// Selects a negative subset from the healthy-control train pool.
pub fn select_negative_subset(
    catalog: &Catalog,
    method: SubsetMethod,
    target_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<NegativeSubset, SelectionError> {
    let pool = catalog.pool(&PoolFilter::healthy_train())?;
    if method != SubsetMethod::All && pool.len() < target_size {
        return Err(SelectionError::PoolTooSmall { available: pool.len(), requested: target_size });
    }
    if method != SubsetMethod::All && target_size == 0 {
        return Err(SelectionError::InvalidStrategy("target_size must be positive".into()));
    }
    let vectors: Vec<&[f64]> = if method.needs_embeddings() {
        let table = catalog.embeddings().ok_or(SelectionError::NoEmbeddings)?;
        pool.iter()
            .map(|r| r.embedding_ref.map(|i| table.row(i)).ok_or_else(|| SelectionError::MissingEmbedding(r.id.clone())))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let picked: Vec<usize> = match method {
        SubsetMethod::All => (0..pool.len()).collect(),
        SubsetMethod::Rand => index::sample(&mut hash::rng_from_seed(seed), pool.len(), target_size).into_vec(),
        SubsetMethod::Spatial => farthest_point_order(&vectors, medoid(&vectors, exec), target_size),
        SubsetMethod::Coverage => {
            let start = hash::rng_from_seed(seed).random_range(0..vectors.len());
            farthest_point_order(&vectors, start, target_size)
        }
        SubsetMethod::Cluster => {
            let km = kmeans(&vectors, target_size, seed, exec);
            // Nearest not-yet-taken pool member per centroid, in centroid order.
            let mut taken = vec![false; vectors.len()];
            km.centroids
                .iter()
                .map(|c| {
                    let mut best: Option<(usize, f64)> = None;
                    for (i, v) in vectors.iter().enumerate() {
                        if taken[i] {
                            continue;
                        }
                        let d = sq_dist(v, c);
                        if best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((i, d));
                        }
                    }
                    let (i, _) = best.expect("pool larger than k");
                    taken[i] = true;
                    i
                })
                .collect()
        }
    };
    let size = if method == SubsetMethod::All { pool.len() } else { target_size };
    Ok(NegativeSubset { method, ids: picked.into_iter().map(|i| pool[i].id.clone()).collect(), target_size: size, seed })
}
