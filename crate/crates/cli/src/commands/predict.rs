use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use voxseg_core::inference::{
    ensemble_mean, labels_from_softmax, postprocess_components, predict_volume, relabel_small_et,
    TileConfig,
};
use voxseg_core::nets::checkpoint::Checkpoint;
use voxseg_core::nets::Network;
use voxseg_core::volume::io::save_labelmap;

use crate::manifest;

#[derive(Args, Serialize, Debug)]
pub struct PredictArgs {
    /// Checkpoint path; repeat the flag for an ensemble (mean softmax).
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sliding-window patch side.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Fractional tile overlap in [0, 0.9].
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Apply connected-component post-processing.
    #[arg(long, default_value_t = false)]
    pub postprocess: bool,
    /// Keep the second component iff size2/size1 >= this ratio.
    #[arg(long, default_value_t = 0.1)]
    pub ratio_threshold: f64,
    /// Relabel all ET voxels to NCR when |ET| < threshold (0 disables).
    #[arg(long, default_value_t = 0)]
    pub relabel_et_threshold: usize,
}

pub fn run(args: &PredictArgs) -> anyhow::Result<()> {
    let nets: Vec<Network> = args
        .checkpoints
        .iter()
        .map(|p| {
            let ck = Checkpoint::load(p).map_err(anyhow::Error::from)?;
            Network::from_checkpoint(&ck).map_err(anyhow::Error::from)
        })
        .collect::<anyhow::Result<_>>()
        .context("loading checkpoints")?;
    let tile = TileConfig {
        patch_size: args.patch,
        overlap: args.overlap,
    };
    let cases = super::load_cases(&args.data, true)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for case in &cases {
        let softmaxes: Vec<_> = nets
            .iter()
            .map(|net| predict_volume(net, case, &tile))
            .collect::<voxseg_core::Result<_>>()
            .with_context(|| format!("predicting {}", case.id))?;
        let mean = ensemble_mean(&softmaxes)?;
        let mut labels = labels_from_softmax(&mean);
        if args.postprocess {
            labels = postprocess_components(&labels, args.ratio_threshold)?;
        }
        if args.relabel_et_threshold > 0 {
            labels = relabel_small_et(&labels, args.relabel_et_threshold);
        }
        let stem = args.out.join(format!("{}_pred", case.id));
        save_labelmap(&labels, &stem, case.spacing)
            .with_context(|| format!("writing {}", stem.display()))?;
    }
    let mut argv = vec!["predict".to_string()];
    for c in &args.checkpoints {
        argv.push("--checkpoint".into());
        argv.push(c.display().to_string());
    }
    argv.extend([
        "--data".into(),
        args.data.display().to_string(),
        "--out".into(),
        args.out.display().to_string(),
        "--patch".into(),
        args.patch.to_string(),
        "--overlap".into(),
        args.overlap.to_string(),
        "--ratio-threshold".into(),
        args.ratio_threshold.to_string(),
        "--relabel-et-threshold".into(),
        args.relabel_et_threshold.to_string(),
    ]);
    if args.postprocess {
        argv.push("--postprocess".into());
    }
    manifest::write(&args.out, "predict", args, argv)
}
