//! Retrieval metrics, cluster purity, and peer-prediction divergence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::l2_normalize_rows;
use crate::datagen::LabeledSample;
use crate::diffcore::{squared_distance, Tensor};
use crate::error::{Error, Result};
use crate::losses::PROB_CLAMP;
use crate::model::Network;

/// Gallery indices by ascending Euclidean distance; ties by index.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Eval("empty gallery".into()));
    }
    let dists: Vec<f64> = gallery.iter().map(|g| squared_distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Mean over relevant positions `k` of precision@k. `None` when nothing is relevant.
pub fn average_precision(ranking: &[usize], relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &idx) in ranking.iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Fraction of queries with a relevant item in the top `k`. Queries without any relevant
/// item are left out of the denominator.
pub fn cmc_at_k(rankings: &[Vec<usize>], masks: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("CMC rank must be at least 1".into()));
    }
    let mut counted = 0usize;
    let mut hits = 0usize;
    for (ranking, mask) in rankings.iter().zip(masks) {
        if !mask.iter().any(|&r| r) {
            continue;
        }
        counted += 1;
        if ranking.iter().take(k).any(|&i| mask[i]) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Eval("no query has a relevant gallery item".into()));
    }
    Ok(hits as f64 / counted as f64)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.clamp(PROB_CLAMP, 1.0);
            let b = b.clamp(PROB_CLAMP, 1.0);
            a * (a / b).ln()
        })
        .sum()
}

/// Mean over rows of the symmetric divergence `½[KL(p‖q) + KL(q‖p)]`.
pub fn peer_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    p.require_same_shape("peer_kl", q)?;
    let rows = p.rows();
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..rows)
        .map(|i| 0.5 * (kl(p.row(i), q.row(i)) + kl(q.row(i), p.row(i))))
        .sum();
    Ok(total / rows as f64)
}

/// `Σ_clusters (largest identity count) / N`.
pub fn cluster_purity(assignments: &[usize], identities: &[usize]) -> Result<f64> {
    if assignments.len() != identities.len() {
        return Err(Error::Eval(format!(
            "{} assignments for {} identities",
            assignments.len(),
            identities.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::Eval("purity of an empty labeling".into()));
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&a, &id) in assignments.iter().zip(identities) {
        *counts.entry(a).or_default().entry(id).or_default() += 1;
    }
    let majority: usize = counts
        .values()
        .map(|c| c.values().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / assignments.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
}

impl Metrics {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Query and gallery row indices: per identity, a seeded 25% of samples (at least one)
/// become queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGallerySplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn split_query_gallery(identities: &[usize], seed: u64) -> QueryGallerySplit {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for members in by_id.values() {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let nq = ((m.len() as f64 * 0.25).round() as usize).max(1).min(m.len());
        queries.extend_from_slice(&m[..nq]);
        gallery.extend_from_slice(&m[nq..]);
    }
    queries.sort_unstable();
    gallery.sort_unstable();
    QueryGallerySplit { queries, gallery }
}

/// mAP and CMC for precomputed (normalized) features.
pub fn retrieval_metrics(
    features: &[Vec<f64>],
    identities: &[usize],
    split: &QueryGallerySplit,
) -> Result<Metrics> {
    let gallery: Vec<Vec<f64>> = split.gallery.iter().map(|&i| features[i].clone()).collect();
    let gallery_ids: Vec<usize> = split.gallery.iter().map(|&i| identities[i]).collect();
    let mut rankings = Vec::with_capacity(split.queries.len());
    let mut masks = Vec::with_capacity(split.queries.len());
    let mut ap_sum = 0.0;
    let mut excluded = 0usize;
    for &q in &split.queries {
        let ranking = rank_gallery(&features[q], &gallery)?;
        let mask: Vec<bool> = gallery_ids.iter().map(|&g| g == identities[q]).collect();
        match average_precision(&ranking, &mask) {
            Some(ap) => ap_sum += ap,
            None => excluded += 1,
        }
        rankings.push(ranking);
        masks.push(mask);
    }
    let counted = split.queries.len() - excluded;
    if counted == 0 {
        return Err(Error::Eval("no query has a relevant gallery item".into()));
    }
    Ok(Metrics {
        map: ap_sum / counted as f64,
        cmc1: cmc_at_k(&rankings, &masks, 1)?,
        cmc5: cmc_at_k(&rankings, &masks, 5)?,
        cmc10: cmc_at_k(&rankings, &masks, 10)?,
        num_queries: counted,
        excluded_queries: excluded,
    })
}

/// L2-normalized features of `net` for every sample.
pub fn embed(net: &Network, samples: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
    let x = Tensor::from_rows(&samples.iter().map(|s| s.vector.as_slice()).collect::<Vec<_>>())?;
    let mut f = net.features(&x)?.to_rows();
    l2_normalize_rows(&mut f);
    Ok(f)
}

/// Retrieval metrics of `net` on `samples` with the seeded query/gallery split.
pub fn evaluate_network(net: &Network, samples: &[LabeledSample], split_seed: u64) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
    let split = split_query_gallery(&ids, split_seed);
    retrieval_metrics(&embed(net, samples)?, &ids, &split)
}
