//! Off-line hard pseudo labels: k-means over target features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{squared_distance, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelSlot, NetworkPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step, first to last.
    pub inertia_history: Vec<f64>,
    pub epoch: usize,
}

impl PseudoLabeling {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    /// Writes `sample_index,pseudo_label` rows.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_index", "pseudo_label"])?;
        for (i, a) in self.assignments.iter().enumerate() {
            w.write_record([i.to_string(), a.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(features: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| squared_distance(f, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass sits on chosen centroids; fall back to a uniform pick
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(features[next].clone());
        let c = centroids.last().expect("just pushed");
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(squared_distance(f, c));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops changing
/// or `max_iter` is reached. Empty clusters are re-seeded with the point farthest from
/// its current centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<PseudoLabeling> {
    let n = features.len();
    if k == 0 {
        return Err(Error::Cluster("number of clusters must be positive".into()));
    }
    if n < k {
        return Err(Error::Cluster(format!(
            "{n} samples cannot form {k} clusters"
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Cluster("features must share a positive dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Cluster("non-finite feature".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut costs = vec![0.0; n];
        for (i, f) in features.iter().enumerate() {
            let (c, dist) = nearest(f, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            costs[i] = dist;
        }
        reseed_empty(features, &mut assignments, &mut costs, &mut centroids);
        history.push(costs.iter().sum());
        if !changed {
            break;
        }
        update_centroids(features, &assignments, &mut centroids);
    }

    let inertia = *history.last().expect("at least one iteration");
    Ok(PseudoLabeling {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
        epoch: 0,
    })
}

fn reseed_empty(
    features: &[Vec<f64>],
    assignments: &mut [usize],
    costs: &mut [f64],
    centroids: &mut [Vec<f64>],
) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // farthest point from its centroid, among clusters that can spare one
        let far = (0..features.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(b.cmp(&a)))
            .expect("n >= k guarantees a cluster with two members");
        centroids[empty] = features[far].clone();
        assignments[far] = empty;
        costs[far] = 0.0;
    }
}

fn update_centroids(features: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let d = features[0].len();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(f) {
            *s += v;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

pub fn l2_normalize_rows(rows: &mut [Vec<f64>]) {
    for r in rows {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Per-class mean of `features` under `assignments`; classes without members stay zero.
pub fn class_means(features: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Features of every pool sample under one model, optionally L2-normalized.
pub fn pool_features(net: &crate::model::Network, pool: &TargetPool, normalize: bool) -> Result<Vec<Vec<f64>>> {
    let x = Tensor::from_rows(&pool.vectors)?;
    let mut features = net.features(&x)?.to_rows();
    if normalize {
        l2_normalize_rows(&mut features);
    }
    Ok(features)
}

/// Target samples as the trainer sees them: vectors and pseudo labels, no identities.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPool {
    pub vectors: Vec<Vec<f64>>,
    pub pseudo_labels: Vec<Option<usize>>,
}

impl TargetPool {
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        let n = vectors.len();
        Self {
            vectors,
            pseudo_labels: vec![None; n],
        }
    }

    pub fn from_samples(samples: &[crate::datagen::LabeledSample]) -> Self {
        Self::new(samples.iter().map(|s| s.vector.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.pseudo_labels.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub num_clusters: usize,
    pub feature_model: ModelSlot,
    pub normalize: bool,
    pub max_iter: usize,
}

/// Clusters the pool's features from `options.feature_model` and writes the assignment
/// into the pool's pseudo labels.
pub fn relabel_epoch(
    pair: &NetworkPair,
    pool: &mut TargetPool,
    options: &ClusterOptions,
    seed: u64,
) -> Result<PseudoLabeling> {
    if pool.is_empty() {
        return Err(Error::Cluster("empty target pool".into()));
    }
    let features = pool_features(pair.get(options.feature_model), pool, options.normalize)?;
    let labeling = kmeans(&features, options.num_clusters, seed, options.max_iter)?;
    for (slot, &a) in pool.pseudo_labels.iter_mut().zip(&labeling.assignments) {
        *slot = Some(a);
    }
    Ok(labeling)
}
