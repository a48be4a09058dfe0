//! Two-stage optimization: supervised source pre-training, then mutual mean-teaching
//! on the unlabeled target domain.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{relabel_epoch, PseudoLabeling, TargetPool};
use crate::config::{ClassifierInit, Datasets, RunConfig, ValidationSource};
use crate::datagen::{sample_pk_batch, two_views, Augmentation, LabeledSample};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{cluster_purity, evaluate_network, peer_kl, Metrics};
use crate::losses::{source_loss, total_mmt_loss, LossTerms, MmtBatch};
use crate::model::{ClassifierParams, ModelSlot, Network, NetworkPair, NetworkVars};
use crate::optim::Adam;

fn optimizer_for(net: &Network, config: &RunConfig) -> Adam {
    Adam::new(config.optimizer, net.params().iter().map(|p| p.len()))
}

fn apply_step(net: &mut Network, opt: &mut Adam, tape: &Tape, vars: &NetworkVars, lr: f64) {
    let grads: Vec<&Tensor> = vars
        .all()
        .iter()
        .map(|&v| tape.grad(v).expect("trainable parameter"))
        .collect();
    let mut params = net.params_mut();
    opt.step(&mut params, &grads, lr);
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Ok(Tensor::from_rows(rows)?)
}

/// Step-decayed learning rate: ×0.1 at half of the epochs and again at seven eighths.
pub fn pretrain_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let e = epoch as f64;
    let total = epochs as f64;
    let mut lr = base;
    if e >= 0.5 * total {
        lr *= 0.1;
    }
    if e >= 0.875 * total {
        lr *= 0.1;
    }
    lr
}

/// Trains both networks independently on identical source batches with
/// `L_id + lambda_s · L_tri`, then syncs the averages to the final weights.
pub fn pretrain_source(source: &[LabeledSample], config: &RunConfig) -> Result<NetworkPair> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Config("empty source dataset".into()));
    }
    let num_classes = source.iter().map(|s| s.identity).max().expect("non-empty") + 1;
    let arch = config.architecture(num_classes);
    let mut pair = NetworkPair::init(&arch, config.seeds.net1, config.seeds.net2)?;
    let stage = config.pretrain;
    if stage.epochs == 0 {
        return Ok(pair);
    }
    let labels: Vec<usize> = source.iter().map(|s| s.identity).collect();
    let aug = Augmentation {
        sigma: config.augment.sigma,
        p_drop: 0.0,
    };
    let mut opt1 = optimizer_for(&pair.net1, config);
    let mut opt2 = optimizer_for(&pair.net2, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.sampler);

    for epoch in 0..stage.epochs {
        let lr = pretrain_lr(stage.lr, epoch, stage.epochs);
        for _ in 0..stage.iters_per_epoch {
            let idx = sample_pk_batch(&labels, config.batch.p, config.batch.k, &mut rng)?;
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| aug.apply(&source[i].vector, &mut rng)).collect();
            let x = rows_to_tensor(&rows)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            for (net, opt) in [(&mut pair.net1, &mut opt1), (&mut pair.net2, &mut opt2)] {
                let mut tape = Tape::new();
                let vars = net.bind(&mut tape, true);
                let (loss, _, _) = source_loss(&mut tape, &vars, &x, &y, &config.weights)?;
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::Numeric(format!("non-finite source loss in epoch {epoch}")));
                }
                tape.backward(loss)?;
                apply_step(net, opt, &tape, &vars, lr);
            }
        }
        log::debug!("pretrain epoch {epoch} lr {lr}");
    }
    pair.sync_averages();
    Ok(pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub purity: Option<f64>,
    /// mAP of net1, net2, avg1, avg2.
    pub map: Option<[f64; 4]>,
    /// Mean symmetric KL between the two average models' predictions over the epoch.
    pub mean_kl: f64,
    pub num_clusters: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step", "epoch"];
        header.extend(LossTerms::NAMES);
        header.extend(["total", "lr"]);
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.epoch.to_string()];
            row.extend(s.terms.values().iter().map(|v| v.to_string()));
            row.push(s.total.to_string());
            row.push(s.lr.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch", "purity", "map_net1", "map_net2", "map_avg1", "map_avg2", "mean_kl",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let maps = e.map.map(|m| m.map(Some)).unwrap_or([None; 4]);
            w.write_record([
                e.epoch.to_string(),
                opt(e.purity),
                opt(maps[0]),
                opt(maps[1]),
                opt(maps[2]),
                opt(maps[3]),
                e.mean_kl.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn final_mean_kl(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_kl)
    }
}

/// Diagnostics that need target ground truth. The trainer only hands over cluster
/// assignments and model snapshots; identities stay with the implementor.
pub trait AdaptMonitor {
    fn purity(&mut self, _labeling: &PseudoLabeling) -> Option<f64> {
        None
    }

    fn model_maps(&mut self, _pair: &NetworkPair) -> Option<[f64; 4]> {
        None
    }
}

pub struct NoMonitor;

impl AdaptMonitor for NoMonitor {}

/// Scores pseudo labels and all four models against held-back ground truth.
pub struct GroundTruthMonitor<'a> {
    pub train_identities: &'a [usize],
    pub eval_set: &'a [LabeledSample],
    pub split_seed: u64,
    pub evaluate_models: bool,
}

impl AdaptMonitor for GroundTruthMonitor<'_> {
    fn purity(&mut self, labeling: &PseudoLabeling) -> Option<f64> {
        cluster_purity(&labeling.assignments, self.train_identities).ok()
    }

    fn model_maps(&mut self, pair: &NetworkPair) -> Option<[f64; 4]> {
        if !self.evaluate_models {
            return None;
        }
        let mut out = [0.0; 4];
        for (o, slot) in out.iter_mut().zip(ModelSlot::ALL) {
            *o = evaluate_network(pair.get(slot), self.eval_set, self.split_seed).ok()?.map;
        }
        Some(out)
    }
}

fn centroid_classifier(features: &[Vec<f64>], labeling: &PseudoLabeling, scale: f64) -> ClassifierParams {
    let m = labeling.num_classes();
    let means = crate::cluster::class_means(features, &labeling.assignments, m);
    let d = means.first().map_or(0, Vec::len);
    let mut w = Tensor::zeros(&[d, m]);
    for (c, mean) in means.iter().enumerate() {
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in mean.iter().enumerate() {
            w.data_mut()[j * m + c] = scale * v / norm;
        }
    }
    ClassifierParams {
        weight: w,
        bias: Tensor::zeros(&[m]),
    }
}

/// Fresh target classifiers for a new labeling. Centroid initialization builds each
/// network's classifier from its own average model's features under the shared
/// assignment, since the two feature spaces are not aligned.
fn new_classifiers(
    config: &RunConfig,
    pair: &NetworkPair,
    pool: &TargetPool,
    labeling: &PseudoLabeling,
    epoch: usize,
) -> Result<(ClassifierParams, ClassifierParams)> {
    let d = config.model.feature_dim;
    let m = labeling.num_classes();
    Ok(match config.cluster.classifier_init {
        ClassifierInit::Centroids => {
            let scale = config.cluster.centroid_scale;
            let normalize = config.cluster.normalize;
            let f1 = crate::cluster::pool_features(&pair.avg1, pool, normalize)?;
            let f2 = crate::cluster::pool_features(&pair.avg2, pool, normalize)?;
            (
                centroid_classifier(&f1, labeling, scale),
                centroid_classifier(&f2, labeling, scale),
            )
        }
        ClassifierInit::Random | ClassifierInit::Persist => {
            let mut r1 = ChaCha8Rng::seed_from_u64(config.seeds.net1.wrapping_add(1 + epoch as u64));
            let mut r2 = ChaCha8Rng::seed_from_u64(config.seeds.net2.wrapping_add(1 + epoch as u64));
            (ClassifierParams::init(d, m, &mut r1), ClassifierParams::init(d, m, &mut r2))
        }
    })
}

/// Mutual mean-teaching on an unlabeled target pool.
///
/// Each epoch re-clusters the pool, resets the target classifiers, then for every
/// mini-batch: takes soft targets from the average models, makes one joint gradient step
/// for both networks, and moves the averages. The step counter runs across epochs.
pub fn adapt_mmt(
    mut pair: NetworkPair,
    pool: &mut TargetPool,
    config: &RunConfig,
    monitor: &mut dyn AdaptMonitor,
) -> Result<(NetworkPair, TrainLog)> {
    config.validate()?;
    let mut log = TrainLog::default();
    let stage = config.adapt;
    if stage.epochs == 0 {
        return Ok((pair, log));
    }
    if pool.is_empty() {
        return Err(Error::Config("empty target pool".into()));
    }
    let weights = config.effective_weights()?;
    let alpha = config.effective_alpha();
    let options = config.mmt_options();
    let cluster_opts = config.cluster_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.sampler ^ 0xada9);
    let mut opt1: Option<Adam> = None;
    let mut opt2: Option<Adam> = None;

    for epoch in 0..stage.epochs {
        let labeling = relabel_epoch(&pair, pool, &cluster_opts, config.seeds.cluster.wrapping_add(epoch as u64))
            .map_err(|e| Error::Cluster(format!("epoch {epoch}: {e}")))?;
        let purity = monitor.purity(&labeling);
        let keep = config.cluster.classifier_init == ClassifierInit::Persist
            && pair.net1.classifier.num_classes() == labeling.num_classes();
        if !keep {
            let (c1, c2) = new_classifiers(config, &pair, pool, &labeling, epoch)?;
            pair.reset_classifiers(c1, c2);
        }
        // fresh classifier → fresh optimizer; stale moments belong to old class indices
        if !keep || opt1.is_none() {
            opt1 = Some(optimizer_for(&pair.net1, config));
            opt2 = Some(optimizer_for(&pair.net2, config));
        }
        let labels = pool.labels().expect("relabel_epoch assigns every sample");

        let mut kl_sum = 0.0;
        for _ in 0..stage.iters_per_epoch {
            let idx = sample_pk_batch(&labels, config.batch.p, config.batch.k, &mut rng)?;
            let mut v1 = Vec::with_capacity(idx.len());
            let mut v2 = Vec::with_capacity(idx.len());
            for &i in &idx {
                let (a, b) = two_views(&pool.vectors[i], &config.augment, &mut rng);
                v1.push(a);
                v2.push(b);
            }
            let batch = MmtBatch {
                view1: rows_to_tensor(&v1)?,
                view2: rows_to_tensor(&v2)?,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            };
            let mut tape = Tape::new();
            let out = total_mmt_loss(&mut tape, &pair, &batch, &weights, &options)?;
            let total = tape.value(out.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite MMT loss at step {}", pair.iteration)));
            }
            kl_sum += peer_kl(&out.teacher_probs.0, &out.teacher_probs.1)?;
            tape.backward(out.total)?;
            apply_step(&mut pair.net1, opt1.as_mut().expect("set above"), &tape, &out.vars1, stage.lr);
            if let Some(v2) = &out.vars2 {
                apply_step(&mut pair.net2, opt2.as_mut().expect("set above"), &tape, v2, stage.lr);
            }
            pair.update_averages(alpha)?;
            log.steps.push(StepRecord {
                step: pair.iteration,
                epoch,
                terms: out.terms,
                total,
                lr: stage.lr,
            });
        }
        let record = EpochRecord {
            epoch,
            purity,
            map: monitor.model_maps(&pair),
            mean_kl: kl_sum / stage.iters_per_epoch.max(1) as f64,
            num_clusters: labeling.num_classes(),
        };
        log::info!(
            "adapt epoch {epoch}: purity {:?} kl {:.4} maps {:?}",
            record.purity,
            record.mean_kl,
            record.map
        );
        log.epochs.push(record);
    }
    Ok((pair, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceChoice {
    pub slot: ModelSlot,
    pub map_avg1: f64,
    pub map_avg2: f64,
}

/// The better-validated of the two average models; ties go to `avg1`.
pub fn select_inference_model(pair: &NetworkPair, validation: &[LabeledSample], split_seed: u64) -> Result<InferenceChoice> {
    if validation.is_empty() {
        return Err(Error::Eval("empty validation set".into()));
    }
    let map_avg1 = evaluate_network(&pair.avg1, validation, split_seed)?.map;
    let map_avg2 = evaluate_network(&pair.avg2, validation, split_seed)?.map;
    let slot = if map_avg2 > map_avg1 {
        ModelSlot::Avg2
    } else {
        ModelSlot::Avg1
    };
    Ok(InferenceChoice {
        slot,
        map_avg1,
        map_avg2,
    })
}

fn validation_set<'a>(config: &RunConfig, data: &'a Datasets) -> &'a [LabeledSample] {
    match config.validation {
        ValidationSource::Source => &data.source_val,
        ValidationSource::OracleTarget => &data.target_test,
    }
}

/// Picks the inference model and scores it on the target test split. A single-network run
/// never trains `net2`, so its only candidate is `avg1`.
pub fn evaluate_pair(pair: &NetworkPair, data: &Datasets, config: &RunConfig) -> Result<(InferenceChoice, Metrics)> {
    let mut choice = select_inference_model(pair, validation_set(config, data), config.seeds.split)?;
    if config.ablation.single_network {
        choice.slot = ModelSlot::Avg1;
    }
    let metrics = evaluate_network(pair.get(choice.slot), &data.target_test, config.seeds.split)?;
    Ok((choice, metrics))
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub pair: NetworkPair,
    pub log: TrainLog,
    pub choice: InferenceChoice,
    pub metrics: Metrics,
}

/// Adapts a pretrained pair on `data.target_train` and evaluates on `data.target_test`.
pub fn adapt_and_evaluate(
    pretrained: &NetworkPair,
    data: &Datasets,
    config: &RunConfig,
    track_models: bool,
) -> Result<AdaptOutcome> {
    let mut pool = TargetPool::from_samples(&data.target_train);
    let ids: Vec<usize> = data.target_train.iter().map(|s| s.identity).collect();
    let mut monitor = GroundTruthMonitor {
        train_identities: &ids,
        eval_set: &data.target_test,
        split_seed: config.seeds.split,
        evaluate_models: track_models,
    };
    let (pair, log) = adapt_mmt(pretrained.clone(), &mut pool, config, &mut monitor)?;
    let (choice, metrics) = evaluate_pair(&pair, data, config)?;
    Ok(AdaptOutcome {
        pair,
        log,
        choice,
        metrics,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    Pretrained,
    Baseline,
    OnlySoft,
    NoHardId,
    NoHardTri,
    NoSoftId,
    NoSoftTri,
    SingleNetwork,
    NoEma,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 10] = [
        AblationRow::Pretrained,
        AblationRow::Baseline,
        AblationRow::OnlySoft,
        AblationRow::NoHardId,
        AblationRow::NoHardTri,
        AblationRow::NoSoftId,
        AblationRow::NoSoftTri,
        AblationRow::SingleNetwork,
        AblationRow::NoEma,
        AblationRow::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Pretrained => "pretrained",
            AblationRow::Baseline => "baseline_hard_only",
            AblationRow::OnlySoft => "only_soft_id_soft_tri",
            AblationRow::NoHardId => "mmt_wo_hard_id",
            AblationRow::NoHardTri => "mmt_wo_hard_tri",
            AblationRow::NoSoftId => "mmt_wo_soft_id",
            AblationRow::NoSoftTri => "mmt_wo_soft_tri",
            AblationRow::SingleNetwork => "mmt_wo_net2",
            AblationRow::NoEma => "mmt_wo_ema",
            AblationRow::Full => "mmt_full",
        }
    }

    /// The run configuration for this row; `None` for the pretrained reference.
    pub fn configure(self, base: &RunConfig) -> Option<RunConfig> {
        let mut c = base.clone();
        c.ablation = Default::default();
        match self {
            AblationRow::Pretrained => return None,
            // one network on hard pseudo labels, no temporal average anywhere
            AblationRow::Baseline => {
                c.weights.lambda_id = 0.0;
                c.weights.lambda_tri = 0.0;
                c.ablation.single_network = true;
                c.ablation.no_ema = true;
            }
            AblationRow::OnlySoft => {
                c.weights.lambda_id = 1.0;
                c.weights.lambda_tri = 1.0;
            }
            AblationRow::NoHardId => c.ablation.no_hard_id = true,
            AblationRow::NoHardTri => c.ablation.no_hard_tri = true,
            AblationRow::NoSoftId => c.ablation.no_soft_id = true,
            AblationRow::NoSoftTri => c.ablation.no_soft_tri = true,
            AblationRow::SingleNetwork => c.ablation.single_network = true,
            AblationRow::NoEma => c.ablation.no_ema = true,
            AblationRow::Full => {}
        }
        Some(c)
    }
}

/// Target metrics and final peer KL of one run, or the error that stopped it.
pub type RunOutcome = std::result::Result<(Metrics, Option<f64>), String>;

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: &'static str,
    pub outcome: RunOutcome,
}

/// Runs every ablation row at the base config's seeds. Rows share one dataset and one
/// pretrained pair; a failing row is recorded and the suite continues.
pub fn run_ablation_suite(base: &RunConfig, rows: &[AblationRow]) -> Result<Vec<AblationResult>> {
    base.validate()?;
    let data = Datasets::generate(&base.data, base.seeds.data)?;
    let pretrained = pretrain_source(&data.source_train, base)?;
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .iter()
            .map(|&row| {
                let (data, pretrained) = (&data, &pretrained);
                s.spawn(move || {
                    let outcome = match row.configure(base) {
                        None => evaluate_pair(pretrained, data, base)
                            .map(|(_, m)| (m, None))
                            .map_err(|e| e.to_string()),
                        Some(cfg) => adapt_and_evaluate(pretrained, data, &cfg, false)
                            .map(|o| (o.metrics, o.log.final_mean_kl()))
                            .map_err(|e| e.to_string()),
                    };
                    AblationResult {
                        row: row.name(),
                        outcome,
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation row panicked"))
            .collect::<Vec<_>>()
    });
    Ok(results)
}

/// Writes one row per run: metrics plus the final-epoch peer KL (empty when not adapted).
pub fn write_metrics_table(path: &Path, key: &str, rows: &[(String, RunOutcome)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([key, "mAP", "cmc1", "cmc5", "cmc10", "peer_kl", "status"])?;
    for (name, r) in rows {
        match r {
            Ok((m, kl)) => w.write_record([
                name.clone(),
                m.map.to_string(),
                m.cmc1.to_string(),
                m.cmc5.to_string(),
                m.cmc10.to_string(),
                kl.map(|v| v.to_string()).unwrap_or_default(),
                "ok".to_string(),
            ])?,
            Err(e) => {
                let mut rec = vec![name.clone()];
                rec.extend(std::iter::repeat_n(String::new(), 5));
                rec.push(format!("failed: {e}"));
                w.write_record(&rec)?
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.data = DataConfig {
            source_identities: 8,
            source_val_identities: 4,
            target_identities: 6,
            target_test_identities: 6,
            samples_per_identity: 6,
            ..DataConfig::default()
        };
        c.batch.p = 4;
        c.batch.k = 2;
        c.cluster.num_clusters = 5;
        c.pretrain.epochs = 2;
        c.pretrain.iters_per_epoch = 3;
        c.adapt.epochs = 2;
        c.adapt.iters_per_epoch = 3;
        c
    }

    #[test]
    fn lr_schedule_decays_at_half_and_seven_eighths() {
        assert_eq!(pretrain_lr(1.0, 39, 80), 1.0);
        assert!((pretrain_lr(1.0, 40, 80) - 0.1).abs() < 1e-15);
        assert!((pretrain_lr(1.0, 69, 80) - 0.1).abs() < 1e-15);
        assert!((pretrain_lr(1.0, 70, 80) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_pretrain_returns_init() {
        let mut c = tiny_config();
        c.pretrain.epochs = 0;
        let data = Datasets::generate(&c.data, 1).unwrap();
        let pair = pretrain_source(&data.source_train, &c).unwrap();
        let arch = c.architecture(8);
        assert_eq!(pair, NetworkPair::init(&arch, c.seeds.net1, c.seeds.net2).unwrap());
    }

    #[test]
    fn pretraining_decouples_and_syncs_averages() {
        let c = tiny_config();
        let data = Datasets::generate(&c.data, 1).unwrap();
        let pair = pretrain_source(&data.source_train, &c).unwrap();
        assert_ne!(pair.net1, pair.net2);
        assert_eq!(pair.avg1, pair.net1);
        assert_eq!(pair.avg2, pair.net2);
        assert!(pretrain_source(&[], &c).is_err());
    }

    #[test]
    fn zero_epochs_adapt_is_identity() {
        let mut c = tiny_config();
        c.adapt.epochs = 0;
        let data = Datasets::generate(&c.data, 1).unwrap();
        let pair = pretrain_source(&data.source_train, &c).unwrap();
        let mut pool = TargetPool::from_samples(&data.target_train);
        let (out, log) = adapt_mmt(pair.clone(), &mut pool, &c, &mut NoMonitor).unwrap();
        assert_eq!(out, pair);
        assert!(log.steps.is_empty() && log.epochs.is_empty());
    }

    #[test]
    fn adaptation_is_deterministic_and_logs_every_step() {
        let c = tiny_config();
        let data = Datasets::generate(&c.data, 1).unwrap();
        let pair = pretrain_source(&data.source_train, &c).unwrap();
        let run = || {
            let mut pool = TargetPool::from_samples(&data.target_train);
            adapt_mmt(pair.clone(), &mut pool, &c, &mut NoMonitor).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.steps.len(), 6);
        assert!(la.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert_eq!(a.iteration, 6);
    }

    #[test]
    fn averages_only_move_through_ema() {
        let mut c = tiny_config();
        c.alpha = 0.5;
        c.adapt.epochs = 1;
        c.adapt.iters_per_epoch = 1;
        let data = Datasets::generate(&c.data, 1).unwrap();
        let pair = pretrain_source(&data.source_train, &c).unwrap();
        let mut pool = TargetPool::from_samples(&data.target_train);
        let (out, _) = adapt_mmt(pair, &mut pool, &c, &mut NoMonitor).unwrap();
        // with a fresh classifier shared by net and average at the epoch start, one step of
        // alpha = 0.5 puts the average classifier halfway
        let expected = ClassifierParams {
            weight: out.net1.classifier.weight.zip_map(&out.avg1.classifier.weight, |_, a| a),
            bias: out.avg1.classifier.bias.clone(),
        };
        assert_eq!(expected, out.avg1.classifier);
        let mut manual = out.avg1.clone();
        manual.encoder = pretrain_source(&data.source_train, &c).unwrap().avg1.encoder;
        crate::model::ema_update_in_place(&mut manual, &out.net1, 0.5).unwrap();
        assert_eq!(manual.encoder, out.avg1.encoder);
    }

    #[test]
    fn inference_choice_prefers_avg1_on_ties() {
        let c = tiny_config();
        let data = Datasets::generate(&c.data, 1).unwrap();
        let mut pair = pretrain_source(&data.source_train, &c).unwrap();
        pair.avg2 = pair.avg1.clone();
        let choice = select_inference_model(&pair, &data.source_val, 0).unwrap();
        assert_eq!(choice.slot, ModelSlot::Avg1);
        assert!(select_inference_model(&pair, &[], 0).is_err());
    }

    #[test]
    fn inference_choice_scores_only_averages() {
        let c = tiny_config();
        let data = Datasets::generate(&c.data, 1).unwrap();
        let trained = pretrain_source(&data.source_train, &c).unwrap();
        let mut untrained = c.clone();
        untrained.pretrain.epochs = 0;
        let init = pretrain_source(&data.source_train, &untrained).unwrap();
        let pair = NetworkPair {
            net1: trained.net1.clone(),
            net2: trained.net2.clone(),
            avg1: init.net2.clone(),
            avg2: trained.net1.clone(),
            iteration: 0,
        };
        let choice = select_inference_model(&pair, &data.source_val, 3).unwrap();
        assert_eq!(choice.map_avg1, evaluate_network(&init.net2, &data.source_val, 3).unwrap().map);
        assert_eq!(choice.map_avg2, evaluate_network(&trained.net1, &data.source_val, 3).unwrap().map);
        let expected = if choice.map_avg2 > choice.map_avg1 {
            ModelSlot::Avg2
        } else {
            ModelSlot::Avg1
        };
        assert_eq!(choice.slot, expected);
    }

    #[test]
    fn ablation_rows_and_wiring() {
        assert_eq!(AblationRow::ALL.len(), 10);
        let base = RunConfig::default();
        assert!(AblationRow::Pretrained.configure(&base).is_none());
        let single = AblationRow::SingleNetwork.configure(&base).unwrap();
        assert!(single.mmt_options().single_network);
        let only = AblationRow::OnlySoft.configure(&base).unwrap();
        let w = only.effective_weights().unwrap();
        assert_eq!((w.lambda_id, w.lambda_tri), (1.0, 1.0));
        assert_eq!(AblationRow::NoEma.configure(&base).unwrap().effective_alpha(), 0.0);
        for row in AblationRow::ALL {
            if let Some(c) = row.configure(&base) {
                assert_eq!(c.seeds, base.seeds);
                assert_eq!(c.data, base.data);
            }
        }
    }
}
