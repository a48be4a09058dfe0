//! Command-line orchestration. Each command reads and writes artifacts in one output
//! directory and echoes its resolved configuration there.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::TargetPool;
use crate::config::{Datasets, RunConfig};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::trainer::{
    adapt_and_evaluate, evaluate_pair, pretrain_source, run_ablation_suite, write_metrics_table, AblationRow,
};

pub const DATA_DIR: &str = "data";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const PRETRAINED: &str = "pretrained.json";
pub const ADAPTED: &str = "adapted.json";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "mmt", version, about = "Mutual mean-teaching domain adaptation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config with flat dotted keys (nested objects are accepted too).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory shared by the pipeline stages.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set weights.lambda_tri=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source/target splits into <out>/data.
    GenData(Common),
    /// Supervised pre-training of both networks on the source domain.
    Pretrain(Common),
    /// Mutual mean-teaching on the target training split.
    Adapt(Common),
    /// Score a checkpoint on the target test split and write metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score; defaults to the adapted one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every ablation row from one shared pre-training.
    Ablate(Common),
    /// Vary one weight over a value grid, others fixed.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "weights.lambda_tri")]
        param: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5,0.8,1.0")]
        values: Vec<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Adapt(c) | Command::Ablate(c) => c,
            Command::Evaluate { common, .. } | Command::SweepLambda { common, .. } => common,
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit code:
/// 0 success, 1 usage/config/missing input, 2 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn load_data(out: &Path) -> Result<Datasets> {
    Datasets::load(&require(out.join(DATA_DIR))?)
}

fn load_checkpoint(path: PathBuf) -> Result<Checkpoint> {
    Checkpoint::load(&require(path)?)
}

fn config_value(config: &RunConfig) -> serde_json::Value {
    serde_json::to_value(config.to_flat()).expect("flat config serializes")
}

pub fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.save_flat(&out.join(RESOLVED_CONFIG))?;

    match command {
        Command::GenData(_) => {
            let data = Datasets::generate(&config.data, config.seeds.data)?;
            data.save(&out.join(DATA_DIR))?;
            log::info!(
                "wrote {} source / {} target training samples",
                data.source_train.len(),
                data.target_train.len()
            );
        }
        Command::Pretrain(_) => {
            let data = load_data(out)?;
            let pair = pretrain_source(&data.source_train, &config)?;
            Checkpoint::from_pair(&pair, config_value(&config)).save(&out.join(PRETRAINED))?;
            let (choice, metrics) = evaluate_pair(&pair, &data, &config)?;
            log::info!(
                "pretrained: validation mAP {:.4}, target mAP {:.4} ({})",
                choice.map_avg1.max(choice.map_avg2),
                metrics.map,
                choice.slot.name()
            );
        }
        Command::Adapt(_) => {
            let data = load_data(out)?;
            let pair = load_checkpoint(out.join(PRETRAINED))?.to_pair()?;
            let outcome = adapt_and_evaluate(&pair, &data, &config, true)?;
            Checkpoint::from_pair(&outcome.pair, config_value(&config)).save(&out.join(ADAPTED))?;
            outcome.log.write_step_csv(&out.join("adapt_steps.csv"))?;
            outcome.log.write_epoch_csv(&out.join("adapt_epochs.csv"))?;
            // final-epoch pseudo labels, regenerated from the adapted models
            let mut pool = TargetPool::from_samples(&data.target_train);
            let labeling = crate::cluster::relabel_epoch(
                &outcome.pair,
                &mut pool,
                &config.cluster_options(),
                config.seeds.cluster.wrapping_add(config.adapt.epochs as u64),
            )?;
            labeling.export_csv(&out.join("pseudo_labels.csv"))?;
            log::info!(
                "adapted target mAP {:.4} ({})",
                outcome.metrics.map,
                outcome.choice.slot.name()
            );
        }
        Command::Evaluate { checkpoint, .. } => {
            let data = load_data(out)?;
            let path = checkpoint.clone().unwrap_or_else(|| out.join(ADAPTED));
            let pair = load_checkpoint(path)?.to_pair()?;
            let (choice, metrics) = evaluate_pair(&pair, &data, &config)?;
            metrics.save(&out.join(METRICS))?;
            println!(
                "mAP {:.4}  top-1 {:.4}  top-5 {:.4}  top-10 {:.4}  ({})",
                metrics.map,
                metrics.cmc1,
                metrics.cmc5,
                metrics.cmc10,
                choice.slot.name()
            );
        }
        Command::Ablate(_) => {
            let results = run_ablation_suite(&config, &AblationRow::ALL)?;
            let rows: Vec<_> = results
                .into_iter()
                .map(|r| (r.row.to_string(), r.outcome))
                .collect();
            write_metrics_table(&out.join("ablation.csv"), "row", &rows)?;
            for (name, r) in &rows {
                match r {
                    Ok((m, kl)) => println!(
                        "{name:<24} mAP {:.4}  top-1 {:.4}  peer KL {}",
                        m.map,
                        m.cmc1,
                        kl.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
                    ),
                    Err(e) => println!("{name:<24} failed: {e}"),
                }
            }
        }
        Command::SweepLambda { param, values, .. } => {
            let base = config.to_flat();
            if !base.contains_key(param) {
                return Err(Error::Config(format!("unknown sweep parameter '{param}'")));
            }
            let configs = values
                .iter()
                .map(|&v| {
                    let mut flat = base.clone();
                    flat.insert(param.clone(), serde_json::json!(v));
                    RunConfig::from_flat(&flat).map(|c| (v, c))
                })
                .collect::<Result<Vec<_>>>()?;
            let data = Datasets::generate(&config.data, config.seeds.data)?;
            let pretrained = pretrain_source(&data.source_train, &config)?;
            let rows = std::thread::scope(|s| {
                let handles: Vec<_> = configs
                    .iter()
                    .map(|(v, c)| {
                        let (data, pretrained) = (&data, &pretrained);
                        s.spawn(move || {
                            let r = adapt_and_evaluate(pretrained, data, c, false)
                                .map(|o| (o.metrics, o.log.final_mean_kl()))
                                .map_err(|e| e.to_string());
                            (v.to_string(), r)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep run panicked"))
                    .collect::<Vec<_>>()
            });
            write_metrics_table(&out.join("sweep.csv"), param, &rows)?;
        }
    }
    Ok(())
}
