//! Run configuration with flat dotted-key JSON files and `key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cluster::ClusterOptions;
use crate::datagen::{self, AffineMap, Augmentation, Domain, DomainSpec, LabeledSample};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MmtOptions, TeacherMining};
use crate::model::{check_alpha, Architecture, ModelSlot};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub input_dim: usize,
    pub source_identities: usize,
    pub source_val_identities: usize,
    pub target_identities: usize,
    pub target_test_identities: usize,
    pub samples_per_identity: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Leading coordinates that carry identity; the rest are nuisance.
    pub identity_dims: usize,
    pub sigma_nuisance: f64,
    /// Target-only gain on the nuisance coordinates (applied before the rotation).
    pub nuisance_gain: f64,
    /// Strength of the rotation into the target domain (0 = none, large = uniform).
    pub domain_mix: f64,
    /// Scale of the random rotation mapping into the target domain.
    pub domain_scale: f64,
    /// Standard deviation of the target-domain offset.
    pub domain_offset: f64,
    /// Identity transform instead of the random rotation.
    pub zero_gap: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            source_identities: 30,
            source_val_identities: 10,
            target_identities: 25,
            target_test_identities: 25,
            samples_per_identity: 20,
            // Identity lives in 4 coordinates; the other 12 are noise that the target
            // domain amplifies. An isotropic rotation of well-separated blobs leaves
            // nothing for adaptation to fix (every method lands near mAP 0.99).
            sigma_between: 2.0,
            sigma_within: 0.4,
            identity_dims: 4,
            sigma_nuisance: 0.3,
            nuisance_gain: 6.0,
            domain_mix: 0.0,
            domain_scale: 1.3,
            domain_offset: 0.0,
            zero_gap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            feature_dim: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub p: usize,
    pub k: usize,
}

/// How the target classifier is set up after each re-clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    /// Fresh random weights every epoch.
    Random,
    /// Weights are the normalized cluster centroids, scaled.
    Centroids,
    /// Keep the previous epoch's classifier.
    Persist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_clusters: usize,
    pub feature_model: ModelSlot,
    pub normalize: bool,
    pub max_iter: usize,
    pub classifier_init: ClassifierInit,
    /// Multiplier on centroid weights when `classifier_init = centroids`.
    pub centroid_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub no_soft_id: bool,
    pub no_soft_tri: bool,
    pub no_hard_id: bool,
    pub no_hard_tri: bool,
    pub single_network: bool,
    pub no_ema: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub net1: u64,
    pub net2: u64,
    pub sampler: u64,
    pub cluster: u64,
    pub split: u64,
}

impl Seeds {
    /// Distinct, reproducible seeds for every random stream from one base value.
    pub fn from_base(base: u64) -> Self {
        let mix = |k: u64| base.wrapping_mul(1_000_003).wrapping_add(k);
        Self {
            data: mix(11),
            net1: mix(23),
            net2: mix(37),
            sampler: mix(41),
            cluster: mix(53),
            split: mix(67),
        }
    }
}

/// Which labels decide between the two average models at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSource {
    /// Held-out labeled source identities.
    Source,
    /// Target test ground truth. Analysis only: this leaks target labels.
    OracleTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Temporal-average momentum.
    pub alpha: f64,
    pub batch: BatchConfig,
    pub pretrain: StageConfig,
    /// Learning rate is constant during adaptation.
    pub adapt: StageConfig,
    pub optimizer: AdamConfig,
    pub augment: Augmentation,
    pub cluster: ClusterConfig,
    pub teacher_mining: TeacherMining,
    pub ablation: AblationFlags,
    pub validation: ValidationSource,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            alpha: 0.999,
            batch: BatchConfig { p: 16, k: 4 },
            pretrain: StageConfig {
                epochs: 16,
                iters_per_epoch: 40,
                lr: 3.5e-3,
            },
            // Re-tuned for the toy problem: slower lr, and long enough that the
            // 0.999 average (about 1000 steps) actually lags the networks.
            adapt: StageConfig {
                epochs: 60,
                iters_per_epoch: 50,
                lr: 1e-3,
            },
            optimizer: AdamConfig::default(),
            augment: Augmentation {
                sigma: 0.3,
                p_drop: 0.1,
            },
            cluster: ClusterConfig {
                num_clusters: 20,
                feature_model: ModelSlot::Avg1,
                normalize: true,
                max_iter: 100,
                classifier_init: ClassifierInit::Centroids,
                centroid_scale: 1.0,
            },
            teacher_mining: TeacherMining::Shared,
            ablation: AblationFlags::default(),
            validation: ValidationSource::Source,
            seeds: Seeds::from_base(0),
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, base: u64) -> Self {
        self.seeds = Seeds::from_base(base);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.weights.validate()?;
        self.effective_weights()?;
        if self.batch.p < 2 || self.batch.k < 2 {
            return Err(Error::Config(format!(
                "batch needs P >= 2 and K >= 2, got P={} K={}",
                self.batch.p, self.batch.k
            )));
        }
        if self.seeds.net1 == self.seeds.net2 {
            return Err(Error::Config("seeds.net1 and seeds.net2 must differ".into()));
        }
        if self.cluster.num_clusters < self.batch.p {
            return Err(Error::Config(format!(
                "{} pseudo classes cannot fill batches of {} classes",
                self.cluster.num_clusters, self.batch.p
            )));
        }
        if self.model.hidden_dim == 0 || self.model.feature_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.p_drop) || !(self.augment.sigma >= 0.0) {
            return Err(Error::Config("augment.p_drop must lie in [0, 1], sigma >= 0".into()));
        }
        for (name, stage) in [("pretrain", &self.pretrain), ("adapt", &self.adapt)] {
            if !(stage.lr > 0.0) {
                return Err(Error::Config(format!("{name}.lr must be positive")));
            }
        }
        Ok(())
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        let a = &self.ablation;
        let mut w = self.weights;
        match (a.no_hard_id, a.no_soft_id) {
            (true, true) => {
                return Err(Error::Config(
                    "no_hard_id and no_soft_id together remove every identity loss".into(),
                ))
            }
            (true, false) => w.lambda_id = 1.0,
            (false, true) => w.lambda_id = 0.0,
            _ => {}
        }
        match (a.no_hard_tri, a.no_soft_tri) {
            (true, true) => {
                return Err(Error::Config(
                    "no_hard_tri and no_soft_tri together remove every triplet loss".into(),
                ))
            }
            (true, false) => w.lambda_tri = 1.0,
            (false, true) => w.lambda_tri = 0.0,
            _ => {}
        }
        Ok(w)
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.no_ema {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn mmt_options(&self) -> MmtOptions {
        MmtOptions {
            single_network: self.ablation.single_network,
            teacher_mining: self.teacher_mining,
        }
    }

    pub fn cluster_options(&self) -> ClusterOptions {
        ClusterOptions {
            num_clusters: self.cluster.num_clusters,
            feature_model: self.cluster.feature_model,
            normalize: self.cluster.normalize,
            max_iter: self.cluster.max_iter,
        }
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            input_dim: self.data.input_dim,
            hidden_dim: self.model.hidden_dim,
            feature_dim: self.model.feature_dim,
            num_classes,
        }
    }

    /// Every effective value under its dotted key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut base = Self::default().to_flat();
        for (k, v) in flat {
            set_key(&mut base, k, v.clone())?;
        }
        let nested = unflatten(&base);
        let cfg: RunConfig = serde_json::from_value(nested)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a flat dotted-key JSON object (missing keys keep their defaults) and applies
    /// `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = BTreeMap::new();
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let Value::Object(map) = value else {
                return Err(Error::Config("config file must hold a JSON object".into()));
            };
            for (k, v) in map {
                if v.is_object() {
                    flatten(&k, &v, &mut flat);
                } else {
                    flat.insert(k, v);
                }
            }
        }
        for ov in overrides {
            let (k, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            flat.insert(k.trim().to_string(), v);
        }
        Self::from_flat(&flat)
    }

    pub fn save_flat(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_flat())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn set_key(base: &mut BTreeMap<String, Value>, key: &str, v: Value) -> Result<()> {
    let Some(slot) = base.get_mut(key) else {
        return Err(Error::Config(format!("unknown configuration key '{key}'")));
    };
    // numbers given where strings are expected (and vice versa) are rejected by serde later
    *slot = match (&*slot, v) {
        (Value::Number(_), Value::String(s)) => serde_json::from_str(&s)
            .map_err(|_| Error::Config(format!("'{key}' expects a number, got '{s}'")))?,
        (_, v) => v,
    };
    Ok(())
}

/// The four synthetic splits used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub source_train: Vec<LabeledSample>,
    pub source_val: Vec<LabeledSample>,
    pub target_train: Vec<LabeledSample>,
    pub target_test: Vec<LabeledSample>,
}

impl Datasets {
    pub const FILES: [&'static str; 4] = [
        "source_train.jsonl",
        "source_val.jsonl",
        "target_train.jsonl",
        "target_test.jsonl",
    ];

    /// Source and target identities are disjoint draws; the two target splits share one
    /// domain transform.
    pub fn generate(data: &DataConfig, seed: u64) -> Result<Self> {
        let transform = if data.zero_gap {
            AffineMap::identity(data.input_dim)
        } else {
            let mut t = AffineMap::partial_rotation(
                data.input_dim,
                data.domain_mix,
                data.domain_scale,
                data.domain_offset,
                seed ^ 0x5eed,
            );
            let d = data.input_dim;
            for i in 0..d {
                for j in data.identity_dims.min(d)..d {
                    t.matrix[i * d + j] *= data.nuisance_gain;
                }
            }
            t
        };
        let spec = |domain, ids, k: u64| DomainSpec {
            domain,
            input_dim: data.input_dim,
            num_identities: ids,
            samples_per_identity: data.samples_per_identity,
            sigma_between: data.sigma_between,
            sigma_within: data.sigma_within,
            identity_dims: data.identity_dims,
            sigma_nuisance: data.sigma_nuisance,
            transform: (domain == Domain::Target).then(|| transform.clone()),
            seed: seed.wrapping_mul(31).wrapping_add(k),
        };
        Ok(Self {
            source_train: datagen::generate(&spec(Domain::Source, data.source_identities, 1))?,
            source_val: datagen::generate(&spec(Domain::Source, data.source_val_identities, 2))?,
            target_train: datagen::generate(&spec(Domain::Target, data.target_identities, 3))?,
            target_test: datagen::generate(&spec(Domain::Target, data.target_test_identities, 4))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let parts = [&self.source_train, &self.source_val, &self.target_train, &self.target_test];
        for (name, data) in Self::FILES.iter().zip(parts) {
            datagen::save_jsonl(&dir.join(name), data)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [a, b, c, d] = Self::FILES.map(|name| datagen::load_jsonl(&dir.join(name)));
        Ok(Self {
            source_train: a?,
            source_val: b?,
            target_train: c?,
            target_test: d?,
        })
    }
}
