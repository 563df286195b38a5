use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::Serialize;
use voxseg_core::augment::AugmentConfig;
use voxseg_core::inference::TileConfig;
use voxseg_core::nets::checkpoint::Checkpoint;
use voxseg_core::nets::Network;
use voxseg_core::uncertainty::{
    collect_hybrid, collect_ttd, collect_tta, entropy_map, mean_prediction, variance_map,
    NetworkPredictor, SampleStack,
};
use voxseg_core::volume::io::{save_labelmap, save_uncertainty, uncertainty_stem};
use voxseg_core::{Case, Region};

use crate::manifest;

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ttd,
    Tta,
    Hybrid,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureArg {
    Variance,
    Entropy,
}

#[derive(Args, Serialize, Debug)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, value_enum)]
    pub measure: MeasureArg,
    /// Stochastic forward passes per case.
    #[arg(long = "B", visible_alias = "b", default_value_t = 20)]
    pub b: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_p: f32,
    /// TTA Gaussian-noise sigma as a fraction of channel std.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f32,
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Base seed; case i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn collect(
    args: &UncertaintyArgs,
    predictor: &NetworkPredictor,
    case: &Case,
    seed: u64,
) -> voxseg_core::Result<SampleStack> {
    let aug = AugmentConfig {
        noise_sigma: args.sigma,
        ..AugmentConfig::default()
    };
    match args.mode {
        ModeArg::Ttd => collect_ttd(predictor, case, args.b, args.dropout_p, seed),
        ModeArg::Tta => collect_tta(predictor, case, args.b, &aug, seed),
        ModeArg::Hybrid => collect_hybrid(predictor, case, args.b, &aug, args.dropout_p, seed),
    }
}

pub fn run(args: &UncertaintyArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).context("loading checkpoint")?;
    let net = Network::from_checkpoint(&ck).context("rebuilding network")?;
    let tile = TileConfig {
        patch_size: args.patch,
        overlap: args.overlap,
    };
    let predictor = NetworkPredictor { net: &net, tile };
    let cases = super::load_cases(&args.data, true)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for (i, case) in cases.iter().enumerate() {
        let stack = collect(args, &predictor, case, args.seed + i as u64)
            .with_context(|| format!("sampling case {}", case.id))?;
        let prediction = mean_prediction(&stack);
        let stem = args.out.join(format!("{}_pred", case.id));
        save_labelmap(&prediction, &stem, case.spacing)?;
        match args.measure {
            MeasureArg::Variance => {
                for region in Region::EVAL {
                    let map = variance_map(&stack, region)?;
                    save_uncertainty(&map, &uncertainty_stem(&args.out, &case.id, region), case.spacing)?;
                }
            }
            MeasureArg::Entropy => {
                let map = entropy_map(&stack)?;
                save_uncertainty(
                    &map,
                    &uncertainty_stem(&args.out, &case.id, Region::Global),
                    case.spacing,
                )?;
            }
        }
    }
    let argv = vec![
        "uncertainty".into(),
        "--checkpoint".into(),
        args.checkpoint.display().to_string(),
        "--data".into(),
        args.data.display().to_string(),
        "--out".into(),
        args.out.display().to_string(),
        "--mode".into(),
        format!("{:?}", args.mode).to_lowercase(),
        "--measure".into(),
        format!("{:?}", args.measure).to_lowercase(),
        "--B".into(),
        args.b.to_string(),
        "--dropout-p".into(),
        args.dropout_p.to_string(),
        "--sigma".into(),
        args.sigma.to_string(),
        "--patch".into(),
        args.patch.to_string(),
        "--overlap".into(),
        args.overlap.to_string(),
        "--seed".into(),
        args.seed.to_string(),
    ];
    manifest::write(&args.out, "uncertainty", args, argv)
}
