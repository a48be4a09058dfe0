//! Synthetic identity datasets with a controllable domain gap, two-view augmentation,
//! and P×K batch sampling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub vector: Vec<f64>,
    pub identity: usize,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<usize>,
}

/// Affine map `x → A·x + b` applied to target-domain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            matrix,
            offset: vec![0.0; dim],
        }
    }

    /// Uniformly random rotation (Gram–Schmidt on a Gaussian matrix) scaled by `scale`,
    /// with a Gaussian offset of standard deviation `offset_std`.
    pub fn random_rotation(dim: usize, scale: f64, offset_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
        let matrix = basis.into_iter().flatten().map(|v| v * scale).collect();
        let offset = (0..dim).map(|_| offset_std * normal.sample(&mut rng)).collect();
        Self { matrix, offset }
    }

    /// Rotation obtained by orthonormalizing `I + mix·G` (G standard Gaussian): `mix = 0`
    /// is the identity, large `mix` approaches a uniformly random rotation.
    pub fn partial_rotation(dim: usize, mix: f64, scale: f64, offset_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let i = basis.len();
            let mut v: Vec<f64> = (0..dim)
                .map(|j| mix * normal.sample(&mut rng) + if i == j { 1.0 } else { 0.0 })
                .collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
        let matrix = basis.into_iter().flatten().map(|v| v * scale).collect();
        let offset = (0..dim).map(|_| offset_std * normal.sample(&mut rng)).collect();
        Self { matrix, offset }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[i]
            })
            .collect()
    }

    /// Absolute determinant via Gaussian elimination with partial pivoting.
    pub fn abs_determinant(&self) -> f64 {
        let d = self.dim();
        let mut m = self.matrix.clone();
        let mut det = 1.0;
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&a, &b| m[a * d + col].abs().total_cmp(&m[b * d + col].abs()))
                .expect("non-empty range");
            let pv = m[pivot * d + col];
            if pv == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..d {
                    m.swap(pivot * d + j, col * d + j);
                }
            }
            det *= pv;
            for r in col + 1..d {
                let factor = m[r * d + col] / pv;
                for j in col..d {
                    m[r * d + j] -= factor * m[col * d + j];
                }
            }
        }
        det.abs()
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub input_dim: usize,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Prototypes vary only in the first `identity_dims` coordinates; the rest are zero.
    pub identity_dims: usize,
    /// Extra per-sample noise on the coordinates past `identity_dims`.
    pub sigma_nuisance: f64,
    /// Applied to every sample of a target domain; ignored for the source.
    pub transform: Option<AffineMap>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_identities == 0 || self.samples_per_identity == 0 {
            return Err(Error::Config(
                "domain needs input_dim, num_identities, samples_per_identity > 0".into(),
            ));
        }
        if self.identity_dims == 0 || self.identity_dims > self.input_dim {
            return Err(Error::Config(format!(
                "identity_dims must lie in 1..={}, got {}",
                self.input_dim, self.identity_dims
            )));
        }
        if !(self.sigma_nuisance >= 0.0) {
            return Err(Error::Config(format!("invalid sigma_nuisance={}", self.sigma_nuisance)));
        }
        if !(self.sigma_between > 0.0) || !(self.sigma_within >= 0.0) {
            return Err(Error::Config(format!(
                "invalid spreads sigma_between={} sigma_within={}",
                self.sigma_between, self.sigma_within
            )));
        }
        if let Some(t) = &self.transform {
            if t.dim() != self.input_dim || t.matrix.len() != self.input_dim * self.input_dim {
                return Err(Error::Config(format!(
                    "transform is {}-dimensional, domain is {}",
                    t.dim(),
                    self.input_dim
                )));
            }
            if t.abs_determinant() < 1e-12 {
                return Err(Error::Config("domain transform is not invertible".into()));
            }
        }
        Ok(())
    }
}

/// Draws identity prototypes, then per-sample noise, then maps target samples through
/// the domain transform. Pure in `spec`.
pub fn generate(spec: &DomainSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if spec.sigma_within >= spec.sigma_between {
        log::warn!(
            "sigma_within ({}) >= sigma_between ({}): identities overlap",
            spec.sigma_within,
            spec.sigma_between
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let between = Normal::new(0.0, spec.sigma_between).expect("validated");
    let prototypes: Vec<Vec<f64>> = (0..spec.num_identities)
        .map(|_| {
            (0..spec.input_dim)
                .map(|j| if j < spec.identity_dims { between.sample(&mut rng) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for (identity, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_identity {
            let mut v: Vec<f64> = proto
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let sigma = if j < spec.identity_dims {
                        spec.sigma_within
                    } else {
                        spec.sigma_within.hypot(spec.sigma_nuisance)
                    };
                    p + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
                .collect();
            if spec.domain == Domain::Target {
                if let Some(t) = &spec.transform {
                    v = t.apply(&v);
                }
            }
            out.push(LabeledSample {
                vector: v,
                identity,
                domain: spec.domain,
                pseudo_label: None,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub sigma: f64,
    pub p_drop: f64,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        sigma: 0.0,
        p_drop: 0.0,
    };

    pub fn apply(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let jitter = if self.sigma > 0.0 {
                    self.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                };
                if self.p_drop > 0.0 && rng.gen_bool(self.p_drop.min(1.0)) {
                    0.0
                } else {
                    v + jitter
                }
            })
            .collect()
    }
}

/// Two independently corrupted copies of `x`.
pub fn two_views(x: &[f64], aug: &Augmentation, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let a = aug.apply(x, rng);
    let b = aug.apply(x, rng);
    (a, b)
}

pub fn two_views_seeded(x: &[f64], aug: &Augmentation, seed: u64) -> (Vec<f64>, Vec<f64>) {
    two_views(x, aug, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Indices of a P×K batch: `p` classes, `k` members each, drawn with replacement from
/// classes smaller than `k`. Batch order is class-major.
pub fn sample_pk_batch(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Sampling(format!(
            "K must be at least 2 for hardest-positive mining, got {k}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < p {
        return Err(Error::Sampling(format!(
            "need {p} non-empty classes, found {}",
            by_class.len()
        )));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let chosen: Vec<&&Vec<usize>> = classes.choose_multiple(rng, p).collect();
    let mut batch = Vec::with_capacity(p * k);
    for members in chosen {
        if members.len() >= k {
            batch.extend(members.choose_multiple(rng, k).copied());
        } else {
            // every member once, then top up with replacement
            let mut picks: Vec<usize> = members.to_vec();
            while picks.len() < k {
                picks.push(*members.choose(rng).expect("non-empty class"));
            }
            batch.extend(picks);
        }
    }
    Ok(batch)
}

pub fn save_jsonl(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<LabeledSample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(domain: Domain) -> DomainSpec {
        DomainSpec {
            domain,
            input_dim: 4,
            num_identities: 3,
            samples_per_identity: 5,
            sigma_between: 4.0,
            sigma_within: 0.5,
            identity_dims: 4,
            sigma_nuisance: 0.0,
            transform: None,
            seed: 11,
        }
    }

    #[test]
    fn partial_rotation_is_orthogonal_and_graded() {
        let id = AffineMap::partial_rotation(5, 0.0, 1.0, 0.0, 3);
        assert_eq!(id, AffineMap::identity(5));
        for mix in [0.1, 1.0, 10.0] {
            let t = AffineMap::partial_rotation(5, mix, 2.0, 0.0, 3);
            for i in 0..5 {
                for j in 0..5 {
                    let dot: f64 = (0..5).map(|c| t.matrix[i * 5 + c] * t.matrix[j * 5 + c]).sum();
                    let expected = if i == j { 4.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-9, "mix {mix}: ({i},{j}) = {dot}");
                }
            }
        }
        let trace = |mix: f64| -> f64 {
            let t = AffineMap::partial_rotation(8, mix, 1.0, 0.0, 9);
            (0..8).map(|i| t.matrix[i * 8 + i]).sum()
        };
        assert!(trace(0.05) > trace(0.5));
    }

    #[test]
    fn nuisance_coordinates_carry_no_identity() {
        let mut s = spec(Domain::Source);
        s.identity_dims = 2;
        s.sigma_within = 0.0;
        s.sigma_nuisance = 1.0;
        let samples = generate(&s).unwrap();
        // identity coordinates are constant per identity, nuisance ones vary
        let first: Vec<&LabeledSample> = samples.iter().filter(|x| x.identity == 0).collect();
        assert!(first.iter().all(|x| x.vector[..2] == first[0].vector[..2]));
        assert!(first.iter().any(|x| x.vector[3] != first[0].vector[3]));
        s.identity_dims = 5;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn zero_noise_gives_identical_samples() {
        let mut s = spec(Domain::Source);
        s.sigma_within = 0.0;
        let data = generate(&s).unwrap();
        for id in 0..3 {
            let members: Vec<_> = data.iter().filter(|x| x.identity == id).collect();
            assert!(members.iter().all(|m| m.vector == members[0].vector));
        }
    }

    #[test]
    fn identity_transform_means_no_gap() {
        let mut t = spec(Domain::Target);
        t.transform = Some(AffineMap::identity(4));
        let src = generate(&spec(Domain::Source)).unwrap();
        let tgt = generate(&t).unwrap();
        for (a, b) in src.iter().zip(&tgt) {
            assert_eq!(a.vector, b.vector);
        }
    }

    #[test]
    fn prototypes_recoverable_from_sample_means() {
        let mut s = spec(Domain::Source);
        s.num_identities = 2;
        s.samples_per_identity = 400;
        let data = generate(&s).unwrap();
        // replay the prototype draw
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let between = Normal::new(0.0, s.sigma_between).unwrap();
        let protos: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| between.sample(&mut rng)).collect())
            .collect();
        let bound = 3.0 * s.sigma_within / (s.samples_per_identity as f64).sqrt();
        for (id, proto) in protos.iter().enumerate() {
            let members: Vec<_> = data.iter().filter(|x| x.identity == id).collect();
            for d in 0..4 {
                let mean = members.iter().map(|m| m.vector[d]).sum::<f64>() / members.len() as f64;
                assert!((mean - proto[d]).abs() < bound, "id {id} dim {d}");
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_invertible() {
        let t = AffineMap::random_rotation(6, 1.3, 0.0, 5);
        let d = 6;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| t.matrix[i * d + k] * t.matrix[j * d + k]).sum();
                let expected = if i == j { 1.69 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
        }
        assert!((t.abs_determinant() - 1.3f64.powi(6)).abs() < 1e-9);
    }

    #[test]
    fn singular_transform_rejected() {
        let mut t = spec(Domain::Target);
        t.transform = Some(AffineMap {
            matrix: vec![0.0; 16],
            offset: vec![0.0; 4],
        });
        assert!(matches!(generate(&t), Err(Error::Config(_))));
    }

    #[test]
    fn two_view_examples() {
        let x = [1.0, -2.0, 3.0];
        let (a, b) = two_views_seeded(&x, &Augmentation::NONE, 1);
        assert_eq!(a, x);
        assert_eq!(b, x);
        let drop_all = Augmentation {
            sigma: 0.3,
            p_drop: 1.0,
        };
        let (a, b) = two_views_seeded(&x, &drop_all, 1);
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
        let aug = Augmentation {
            sigma: 0.3,
            p_drop: 0.2,
        };
        assert_eq!(two_views_seeded(&x, &aug, 9), two_views_seeded(&x, &aug, 9));
        let (a, b) = two_views_seeded(&x, &aug, 9);
        assert_ne!(a, b);
    }

    #[test]
    fn pk_batch_examples() {
        let labels: Vec<usize> = (0..20).flat_map(|c| std::iter::repeat_n(c, 5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_pk_batch(&labels, 16, 4, &mut rng).unwrap().len(), 64);

        let b = sample_pk_batch(&labels, 1, 2, &mut rng).unwrap();
        assert_eq!(labels[b[0]], labels[b[1]]);

        let labels = vec![0, 1, 1, 1, 1, 1];
        let b = sample_pk_batch(&labels, 2, 4, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|&&i| i == 0).count(), 4);

        assert!(matches!(
            sample_pk_batch(&[0, 0, 1], 3, 2, &mut rng),
            Err(Error::Sampling(_))
        ));
        assert!(matches!(
            sample_pk_batch(&[0, 0, 1], 1, 1, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let data = generate(&spec(Domain::Source)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&path, &data).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), data);
    }

    proptest! {
        #[test]
        fn every_batch_member_has_a_positive(
            sizes in proptest::collection::vec(1usize..6, 3..10),
            p in 2usize..4,
            k in 2usize..5,
            seed in 0u64..1000,
        ) {
            let labels: Vec<usize> = sizes.iter().enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_pk_batch(&labels, p, k, &mut rng).unwrap();
            prop_assert_eq!(batch.len(), p * k);
            for (pos, &i) in batch.iter().enumerate() {
                let companions = batch.iter().enumerate()
                    .filter(|&(q, &j)| q != pos && labels[j] == labels[i]).count();
                prop_assert!(companions >= k - 1);
            }
        }

        #[test]
        fn generation_is_pure(seed in 0u64..500) {
            let mut s = spec(Domain::Target);
            s.seed = seed;
            s.transform = Some(AffineMap::random_rotation(4, 1.3, 0.5, seed));
            prop_assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        }
    }
}
