//! Warm-started Lloyd's K-means over a bounded feature repository.
//!
//! The un-mixer: incoming high-frequency features are pushed into a ring
//! buffer; each step re-clusters the buffer, warm-starting from the previous
//! centroids so cluster indices keep their identity across steps (no
//! relabeling permutation is ever applied). Labels are reported for the most
//! recently pushed batch.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Ring buffer of feature vectors, insertion order preserved.
#[derive(Debug, Clone)]
pub struct FeatureRepository {
    capacity: usize,
    dim: Option<usize>,
    buf: VecDeque<Vec<f64>>,
    last_push: usize,
}

impl FeatureRepository {
    /// `capacity` is the K-means window size N.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "repository capacity must be positive");
        FeatureRepository {
            capacity,
            dim: None,
            buf: VecDeque::with_capacity(capacity),
            last_push: 0,
        }
    }

    /// Appends a batch; after overflow the buffer holds exactly the last
    /// `capacity` vectors in push order. Errors on dimension mismatch.
    pub fn push(&mut self, features: &[Vec<f64>]) -> Result<()> {
        for f in features {
            match self.dim {
                None => self.dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(Error::shape(format!(
                        "feature dim {} does not match repository dim {d}",
                        f.len()
                    )));
                }
                _ => {}
            }
            if self.buf.len() == self.capacity {
                self.buf.pop_front();
            }
            self.buf.push_back(f.clone());
        }
        self.last_push = features.len().min(self.capacity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Size of the most recent push (clipped to capacity).
    pub fn last_push_len(&self) -> usize {
        self.last_push
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.buf.iter()
    }
}

/// Centroids plus the labels of the current batch.
#[derive(Debug, Clone, Default)]
pub struct ClusterState {
    /// K centroids, each of the repository's feature dimension.
    pub centroids: Vec<Vec<f64>>,
    /// Labels (`0..K`) of the most recently pushed vectors, in push order.
    pub assignments: Vec<usize>,
    pub initialized: bool,
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Nearest centroid per feature; ties broken by the LOWEST centroid index.
pub fn assign(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    features
        .iter()
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d = dist2(f, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn kmeans_objective(points: &[&Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| dist2(p, &centroids[l]))
        .sum()
}

/// k-means++ seeding over the repository contents.
fn kmeans_plus_plus(points: &[&Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.index(points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.uniform() * total;
            let mut cum = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                cum += d;
                if r < cum {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with chosen centroids; any point works.
            rng.index(points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn centroid_means(
    points: &[&Vec<f64>],
    labels: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

/// One warm-started K-means pass over the repository.
///
/// Cold starts use k-means++ seeding from `rng`; warm starts continue from
/// `state.centroids`. Lloyd iterations run until the largest relative
/// centroid movement drops below `tol` or `max_iter` is reached. Empty
/// clusters are repaired by claiming the point farthest from its assigned
/// centroid. The returned assignments cover the repository's most recent
/// push, under the final centroids.
pub fn kmeans_step(
    repo: &FeatureRepository,
    k: usize,
    state: &ClusterState,
    max_iter: usize,
    tol: f64,
    rng: &mut SeededRng,
) -> Result<ClusterState> {
    kmeans_step_traced(repo, k, state, max_iter, tol, rng, None)
}

/// [`kmeans_step`] that can record the objective after each Lloyd iteration
/// (used by tests asserting monotonicity).
pub fn kmeans_step_traced(
    repo: &FeatureRepository,
    k: usize,
    state: &ClusterState,
    max_iter: usize,
    tol: f64,
    rng: &mut SeededRng,
    mut objective_trace: Option<&mut Vec<f64>>,
) -> Result<ClusterState> {
    if k == 0 {
        return Err(Error::config("clusters", "K must be ≥ 1"));
    }
    if repo.len() < k {
        return Err(Error::shape(format!(
            "repository holds {} vectors, need at least K = {k}",
            repo.len()
        )));
    }
    let points: Vec<&Vec<f64>> = repo.iter().collect();
    let dim = points[0].len();

    let mut centroids = if state.initialized {
        if state.centroids.len() != k {
            return Err(Error::shape(format!(
                "warm-start has {} centroids, expected {k}",
                state.centroids.len()
            )));
        }
        if state.centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::shape("warm-start centroid dimension mismatch"));
        }
        state.centroids.clone()
    } else {
        kmeans_plus_plus(&points, k, rng)
    };

    let mut labels = vec![0usize; points.len()];
    for _ in 0..max_iter {
        labels = assign_refs(&points, &centroids);
        let (mut new_centroids, mut counts) = centroid_means(&points, &labels, k, dim);
        // Repair empty clusters: hand each one the point currently farthest
        // from its own centroid (tie → lowest point index).
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut far_i = 0usize;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                // Only steal from clusters that keep at least one point.
                if counts[labels[i]] <= 1 {
                    continue;
                }
                let d = dist2(p, &new_centroids[labels[i]]);
                if d > far_d {
                    far_d = d;
                    far_i = i;
                }
            }
            counts[labels[far_i]] -= 1;
            labels[far_i] = empty;
            counts[empty] = 1;
            new_centroids[empty] = points[far_i].clone();
        }
        // Empty-cluster repair changed memberships; refresh the means.
        let (refreshed, _) = centroid_means(&points, &labels, k, dim);
        let new_centroids = refreshed;

        if let Some(trace) = objective_trace.as_deref_mut() {
            trace.push(kmeans_objective(&points, &labels, &new_centroids));
        }

        let movement = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(old, new)| {
                let norm_old = old.iter().map(|v| v * v).sum::<f64>().sqrt();
                (dist2(old, new).sqrt()) / (1.0 + norm_old)
            })
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if movement < tol {
            break;
        }
    }

    // Labels for the current batch, under the final centroids.
    let final_labels = assign_refs(&points, &centroids);
    let n = repo.last_push_len();
    let assignments = final_labels[points.len() - n..].to_vec();

    Ok(ClusterState {
        centroids,
        assignments,
        initialized: true,
    })
}

fn assign_refs(points: &[&Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d = dist2(f, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Cluster purity against ground-truth domain tags:
/// `Σ_k max_d |cluster k ∩ domain d| / total`.
pub fn purity(labels: &[usize], ground_truth_domains: &[usize]) -> Result<f64> {
    if labels.is_empty() || labels.len() != ground_truth_domains.len() {
        return Err(Error::shape(format!(
            "purity needs equal nonempty label/domain slices, got {} and {}",
            labels.len(),
            ground_truth_domains.len()
        )));
    }
    let k = labels.iter().max().unwrap() + 1;
    let d = ground_truth_domains.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; d]; k];
    for (&l, &g) in labels.iter().zip(ground_truth_domains) {
        counts[l][g] += 1;
    }
    let majority_sum: usize = counts
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority_sum as f64 / labels.len() as f64)
}
