//! k-means over neuron activation vectors, representative selection and
//! per-neuron cluster radii.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ActivationMatrix;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

/// Norm used to measure a neuron's distance from its representative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonNorm {
    /// Euclidean norm over the full activation vector.
    #[default]
    L2,
    /// Largest coordinate difference; tighter, still dominates every input.
    Linf,
}

impl std::str::FromStr for EpsilonNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(EpsilonNorm::L2),
            "linf" => Ok(EpsilonNorm::Linf),
            other => Err(Error::Argument(format!(
                "unknown epsilon norm {other:?} (l2|linf)"
            ))),
        }
    }
}

impl EpsilonNorm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            EpsilonNorm::L2 => squared_distance(a, b).sqrt(),
            EpsilonNorm::Linf => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        }
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clustering of one hidden layer's neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClustering {
    pub layer: usize,
    /// Disjoint, exhaustive, each sorted ascending; ordered by first member.
    pub clusters: Vec<Vec<usize>>,
    /// `representatives[c]` is a member of `clusters[c]`.
    pub representatives: Vec<usize>,
    /// Distance of every neuron of the layer from its representative.
    pub epsilon: Vec<f64>,
}

impl LayerClustering {
    /// Every neuron in its own cluster.
    pub fn identity(layer: usize, width: usize) -> Self {
        Self {
            layer,
            clusters: (0..width).map(|i| vec![i]).collect(),
            representatives: (0..width).collect(),
            epsilon: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.epsilon.len()
    }

    /// Checks the partition and representative invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.width();
        if self.representatives.len() != self.clusters.len() {
            return Err(Error::Validation(format!(
                "layer {}: {} representatives for {} clusters",
                self.layer,
                self.representatives.len(),
                self.clusters.len()
            )));
        }
        let mut seen = vec![false; n];
        for (c, members) in self.clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!(
                    "layer {}: cluster {c} is empty",
                    self.layer
                )));
            }
            for &m in members {
                if m >= n || seen[m] {
                    return Err(Error::Validation(format!(
                        "layer {}: neuron {m} out of range or in two clusters",
                        self.layer
                    )));
                }
                seen[m] = true;
            }
            if !members.contains(&self.representatives[c]) {
                return Err(Error::Validation(format!(
                    "layer {}: representative {} not in cluster {c}",
                    self.layer, self.representatives[c]
                )));
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "layer {}: neuron {m} unclustered",
                self.layer
            )));
        }
        if self.epsilon.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(Error::Validation(format!(
                "layer {}: negative epsilon",
                self.layer
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Sorted members per cluster; clusters ordered by their first member.
    pub clusters: Vec<Vec<usize>>,
    /// Mean of each cluster, same order as `clusters`.
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after every centroid update.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // All remaining points coincide with a center.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

fn means(points: &[&[f64]], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let n = n.max(1) as f64;
        s.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

fn inertia(points: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[&[f64]], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignment[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        assignment[far.expect("k <= n leaves a cluster with two members")] = empty;
    }
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`.
pub fn kmeans_rows(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(Error::Argument(format!("k = {k} outside [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut inertia_history = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &centroids, k);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        centroids = means(points, &assignment, k);
        inertia_history.push(inertia(points, &assignment, &centroids));
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| clusters[c][0]);
    Ok(KMeansResult {
        clusters: order.iter().map(|&c| clusters[c].clone()).collect(),
        centroids: order.iter().map(|&c| centroids[c].clone()).collect(),
        inertia_history,
        converged,
    })
}

/// Clusters the neurons (rows) of an activation matrix into `k` groups.
pub fn kmeans(activations: &ActivationMatrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let rows: Vec<&[f64]> = (0..activations.num_neurons())
        .map(|i| activations.neuron(i))
        .collect();
    kmeans_rows(&rows, k, seed)
}

/// Member closest (Euclidean) to `centroid`; the lowest index wins ties.
pub fn pick_representative(
    cluster: &[usize],
    activations: &ActivationMatrix,
    centroid: &[f64],
) -> usize {
    let mut best = cluster[0];
    let mut best_d = f64::INFINITY;
    for &m in cluster {
        let d = squared_distance(activations.neuron(m), centroid);
        if d < best_d || (d == best_d && m < best) {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Distance of every neuron's activation vector from its representative's.
pub fn epsilon_vector(
    activations: &ActivationMatrix,
    clusters: &[Vec<usize>],
    representatives: &[usize],
    norm: EpsilonNorm,
) -> Vec<f64> {
    let mut eps = vec![0.0; activations.num_neurons()];
    for (members, &rep) in clusters.iter().zip(representatives) {
        for &m in members {
            if m != rep {
                eps[m] = norm.distance(activations.neuron(m), activations.neuron(rep));
            }
        }
    }
    eps
}

/// k-means, representatives and radii for one layer in a single call.
pub fn cluster_layer(
    activations: &ActivationMatrix,
    k: usize,
    seed: u64,
    norm: EpsilonNorm,
) -> Result<LayerClustering> {
    let km = kmeans(activations, k, seed)?;
    let representatives: Vec<usize> = km
        .clusters
        .iter()
        .zip(&km.centroids)
        .map(|(members, centroid)| pick_representative(members, activations, centroid))
        .collect();
    let epsilon = epsilon_vector(activations, &km.clusters, &representatives, norm);
    Ok(LayerClustering {
        layer: activations.layer,
        clusters: km.clusters,
        representatives,
        epsilon,
    })
}
