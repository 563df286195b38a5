use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use voxseg_core::metrics::{evaluate_case, EvalReport};
use voxseg_core::volume::io::{load_labelmap, load_uncertainty, uncertainty_stem};
use voxseg_core::volume::regions_from_labels;
use voxseg_core::{Region, UncertaintyMap};

use crate::manifest;

#[derive(Args, Serialize, Debug)]
pub struct EvaluateArgs {
    /// Directory holding `<id>_pred` label maps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth case directories.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory holding `<id>_unc_<region>` maps (optional).
    #[arg(long)]
    pub unc: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Uncertainty threshold grid step (divides 100).
    #[arg(long, default_value_t = 5)]
    pub threshold_step: u8,
}

#[derive(Default, Serialize)]
struct Aggregate {
    cases: usize,
    dice: f64,
    hd95: f64,
    sensitivity: f64,
    specificity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dice_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ftp_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ftn_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    integrated: Option<f64>,
}

fn load_unc_maps(
    dir: &PathBuf,
    case_id: &str,
) -> BTreeMap<&'static str, UncertaintyMap> {
    let mut maps = BTreeMap::new();
    for region in [Region::Wt, Region::Tc, Region::Et, Region::Global] {
        let stem = uncertainty_stem(dir, case_id, region);
        if let Ok(map) = load_uncertainty(&stem) {
            maps.insert(region.name(), map);
        }
    }
    maps
}

fn csv_row(report: &EvalReport) -> String {
    let mut rows = String::new();
    for (region, s) in &report.regions {
        let unc = report
            .uncertainty
            .iter()
            .find(|(r, _)| r == region)
            .map(|(_, u)| u);
        let unc_cols = match unc {
            Some(u) => format!(
                "{:.6},{:.6},{:.6},{:.6}",
                u.dice_auc, u.ftp_auc, u.ftn_auc, u.integrated
            ),
            None => ",,,".to_string(),
        };
        rows.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            report.case_id,
            region.name(),
            s.dice,
            s.hd95,
            s.sensitivity,
            s.specificity,
            unc_cols
        ));
    }
    rows
}

pub fn run(args: &EvaluateArgs) -> anyhow::Result<()> {
    let gt_cases = super::load_cases(&args.gt, false)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut csv =
        String::from("case,region,dice,hd95,sensitivity,specificity,dice_auc,ftp_auc,ftn_auc,integrated\n");
    let mut reports = Vec::new();
    for case in &gt_cases {
        let gt_labels = case
            .labels
            .as_ref()
            .with_context(|| format!("case {} has no ground-truth labels", case.id))?;
        let pred_stem = args.pred.join(format!("{}_pred", case.id));
        let pred_labels = load_labelmap(&pred_stem)
            .with_context(|| format!("loading prediction {}", pred_stem.display()))?;
        let unc_maps = match &args.unc {
            Some(dir) => load_unc_maps(dir, &case.id),
            None => BTreeMap::new(),
        };
        let report = evaluate_case(
            &case.id,
            &regions_from_labels(&pred_labels),
            &regions_from_labels(gt_labels),
            &case.brain_mask,
            case.spacing,
            |region| {
                unc_maps
                    .get(region.name())
                    .or_else(|| unc_maps.get(Region::Global.name()))
            },
            args.threshold_step,
        )
        .with_context(|| format!("evaluating {}", case.id))?;
        csv.push_str(&csv_row(&report));
        reports.push(report);
    }
    std::fs::write(args.out.join("per_case.csv"), &csv).context("writing per_case.csv")?;

    // Aggregate means per region.
    let mut summary: BTreeMap<&'static str, Aggregate> = BTreeMap::new();
    for report in &reports {
        for (region, s) in &report.regions {
            let agg = summary.entry(region.name()).or_default();
            agg.cases += 1;
            agg.dice += s.dice;
            agg.hd95 += s.hd95;
            agg.sensitivity += s.sensitivity;
            agg.specificity += s.specificity;
            if let Some((_, u)) = report.uncertainty.iter().find(|(r, _)| r == region) {
                *agg.dice_auc.get_or_insert(0.0) += u.dice_auc;
                *agg.ftp_auc.get_or_insert(0.0) += u.ftp_auc;
                *agg.ftn_auc.get_or_insert(0.0) += u.ftn_auc;
                *agg.integrated.get_or_insert(0.0) += u.integrated;
            }
        }
    }
    for agg in summary.values_mut() {
        let n = agg.cases as f64;
        agg.dice /= n;
        agg.hd95 /= n;
        agg.sensitivity /= n;
        agg.specificity /= n;
        for opt in [
            &mut agg.dice_auc,
            &mut agg.ftp_auc,
            &mut agg.ftn_auc,
            &mut agg.integrated,
        ] {
            if let Some(v) = opt.as_mut() {
                *v /= n;
            }
        }
    }
    let body = serde_json::to_string_pretty(&summary)?;
    std::fs::write(args.out.join("summary.json"), body).context("writing summary.json")?;

    let mut argv = vec![
        "evaluate".to_string(),
        "--pred".into(),
        args.pred.display().to_string(),
        "--gt".into(),
        args.gt.display().to_string(),
    ];
    if let Some(u) = &args.unc {
        argv.push("--unc".into());
        argv.push(u.display().to_string());
    }
    argv.extend([
        "--out".into(),
        args.out.display().to_string(),
        "--threshold-step".into(),
        args.threshold_step.to_string(),
    ]);
    manifest::write(&args.out, "evaluate", args, argv)
}
