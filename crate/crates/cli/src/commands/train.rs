use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use voxseg_core::nets::{NetConfig, Network};
use voxseg_core::trainer::{train, write_metrics_csv, TrainConfig, TrainData};

use crate::manifest;

#[derive(Args, Serialize, Debug)]
pub struct TrainArgs {
    /// JSON file holding net and trainer configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of labelled case directories.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, metrics and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

/// Declarative run configuration; every field is explicit in the file
/// and the resolved struct is recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFileConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    /// Fraction of cases held out for validation (last cases in sorted
    /// order). With a single case, validation aliases training.
    pub val_fraction: f64,
}

#[derive(Serialize)]
struct ResolvedArgs<'a> {
    cli: &'a TrainArgs,
    config: &'a TrainFileConfig,
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let body = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg: TrainFileConfig =
        serde_json::from_str(&body).with_context(|| format!("parsing {}", args.config.display()))?;

    let cases = super::load_cases(&args.data, true)?;
    let (train_cases, val_cases) = if cases.len() == 1 {
        (cases.clone(), cases)
    } else {
        let n_val = ((cases.len() as f64 * cfg.val_fraction).round() as usize)
            .clamp(1, cases.len() - 1);
        let split = cases.len() - n_val;
        (cases[..split].to_vec(), cases[split..].to_vec())
    };
    let data = TrainData {
        train: train_cases,
        val: val_cases,
    };

    let mut net = Network::build(&cfg.net, cfg.init_seed).context("building network")?;
    let report = train(&mut net, &data, &cfg.train).context("training")?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    report
        .best
        .save(&args.out.join("best.vckpt"))
        .context("writing best checkpoint")?;
    report
        .last
        .save(&args.out.join("last.vckpt"))
        .context("writing last checkpoint")?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report.epochs)
        .context("writing metrics")?;

    let argv = vec![
        "train".into(),
        "--config".into(),
        args.config.display().to_string(),
        "--data".into(),
        args.data.display().to_string(),
        "--out".into(),
        args.out.display().to_string(),
    ];
    manifest::write(
        &args.out,
        "train",
        &ResolvedArgs { cli: args, config: &cfg },
        argv,
    )?;
    eprintln!(
        "trained {} epochs, best validation loss {:.6}",
        report.epochs.len(),
        report.best_val
    );
    Ok(())
}
