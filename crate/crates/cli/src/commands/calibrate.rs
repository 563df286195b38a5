use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use voxseg_core::inference::calibrate_ratio_threshold;
use voxseg_core::volume::io::load_labelmap;

use crate::manifest;

#[derive(Args, Serialize, Debug)]
pub struct CalibrateArgs {
    /// Directory holding `<id>_pred` label maps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of labelled ground-truth case directories.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate ratio thresholds.
    #[arg(long, default_value = "0.02,0.05,0.1,0.2,0.3,0.5")]
    pub thresholds: String,
}

#[derive(Serialize)]
struct Best {
    ratio_threshold: f64,
    mean_wt_dice: f64,
}

pub fn run(args: &CalibrateArgs) -> anyhow::Result<()> {
    let thresholds: Vec<f64> = super::parse_list(&args.thresholds)?;
    let gt_cases = super::load_cases(&args.gt, false)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for case in &gt_cases {
        let stem = args.pred.join(format!("{}_pred", case.id));
        preds.push(
            load_labelmap(&stem)
                .with_context(|| format!("loading prediction {}", stem.display()))?,
        );
        gts.push(
            case.labels
                .clone()
                .with_context(|| format!("case {} has no labels", case.id))?,
        );
    }
    let sweep = calibrate_ratio_threshold(&preds, &gts, &thresholds)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut csv = String::from("ratio_threshold,mean_wt_dice\n");
    for (t, d) in &sweep {
        csv.push_str(&format!("{t},{d:.6}\n"));
    }
    std::fs::write(args.out.join("sweep.csv"), csv).context("writing sweep.csv")?;
    let best = sweep
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .context("empty sweep")?;
    let body = serde_json::to_string_pretty(&Best {
        ratio_threshold: best.0,
        mean_wt_dice: best.1,
    })?;
    std::fs::write(args.out.join("best.json"), body).context("writing best.json")?;

    let argv = vec![
        "calibrate-postproc".into(),
        "--pred".into(),
        args.pred.display().to_string(),
        "--gt".into(),
        args.gt.display().to_string(),
        "--out".into(),
        args.out.display().to_string(),
        "--thresholds".into(),
        args.thresholds.clone(),
    ];
    manifest::write(&args.out, "calibrate-postproc", args, argv)
}
