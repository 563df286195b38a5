//! Segmentation and uncertainty evaluation.
//!
//! Dice uses the both-empty-equals-1 convention; HD95 is the symmetric
//! 95th-percentile Hausdorff distance over spacing-scaled Euclidean
//! voxel distances, computed with an exact separable distance transform.
//! Uncertainty evaluation filters voxels whose uncertainty exceeds a
//! threshold T, tracks the Dice of the survivors and the ratios of
//! filtered-out true positives/negatives, and integrates all three over
//! the threshold sweep:
//!
//! ```text
//! score = AUC_dice + (1 - AUC_ftp) + (1 - AUC_ftn)
//! ```

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{Region, UncertaintyMap};

/// Worst-case distance reported when exactly one mask is empty
/// (the conventional penalty diagonal, in mm).
pub const HD_EMPTY_SENTINEL_MM: f64 = 373.13;

fn check_shapes(x: &Array3<bool>, y: &Array3<bool>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Dice overlap 2|X n Y| / (|X| + |Y|); 1 when both masks are empty,
/// 0 when exactly one is.
pub fn dice(x: &Array3<bool>, y: &Array3<bool>) -> Result<f64> {
    check_shapes(x, y)?;
    let mut inter = 0usize;
    let mut nx = 0usize;
    let mut ny = 0usize;
    for (&a, &b) in x.iter().zip(y.iter()) {
        nx += a as usize;
        ny += b as usize;
        inter += (a && b) as usize;
    }
    if nx == 0 && ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) with anisotropic sample spacing.
fn dt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n]; // parabola apexes
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let x = |i: usize| i as f64 * spacing;
    for q in 1..n {
        if f[q] == f64::INFINITY && f[v[k]] == f64::INFINITY {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            if f[q] == f64::INFINITY {
                s = f64::INFINITY;
            } else if f[p] == f64::INFINITY {
                s = f64::NEG_INFINITY;
            } else {
                s = (f[q] + x(q) * x(q) - f[p] - x(p) * x(p)) / (2.0 * x(q) - 2.0 * x(p));
            }
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s == f64::INFINITY {
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = x(q) - x(p);
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the
/// nearest set voxel of `mask`, via three separable 1-D transforms.
pub fn distance_sq_to_mask(mask: &Array3<bool>, spacing: [f32; 3]) -> Array3<f64> {
    let (d, h, w) = mask.dim();
    let mut dist = Array3::<f64>::from_elem((d, h, w), f64::INFINITY);
    ndarray::Zip::from(&mut dist).and(mask).for_each(|o, &m| {
        if m {
            *o = 0.0;
        }
    });
    // Axis 2 (W), then 1 (H), then 0 (D).
    let mut buf_in = vec![0.0f64; w.max(h).max(d)];
    let mut buf_out = vec![0.0f64; w.max(h).max(d)];
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                buf_in[wi] = dist[[di, hi, wi]];
            }
            dt_1d(&buf_in[..w], spacing[2] as f64, &mut buf_out[..w]);
            for wi in 0..w {
                dist[[di, hi, wi]] = buf_out[wi];
            }
        }
    }
    for di in 0..d {
        for wi in 0..w {
            for hi in 0..h {
                buf_in[hi] = dist[[di, hi, wi]];
            }
            dt_1d(&buf_in[..h], spacing[1] as f64, &mut buf_out[..h]);
            for hi in 0..h {
                dist[[di, hi, wi]] = buf_out[hi];
            }
        }
    }
    for hi in 0..h {
        for wi in 0..w {
            for di in 0..d {
                buf_in[di] = dist[[di, hi, wi]];
            }
            dt_1d(&buf_in[..d], spacing[0] as f64, &mut buf_out[..d]);
            for di in 0..d {
                dist[[di, hi, wi]] = buf_out[di];
            }
        }
    }
    dist
}

/// Percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn directed_p95(from: &Array3<bool>, dist_sq_to_other: &Array3<f64>) -> f64 {
    let mut ds: Vec<f64> = from
        .iter()
        .zip(dist_sq_to_other.iter())
        .filter(|(&m, _)| m)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile(&ds, 0.95)
}

/// Symmetric 95th-percentile Hausdorff distance in mm.
/// Both masks empty: 0. Exactly one empty: [`HD_EMPTY_SENTINEL_MM`].
pub fn hd95(x: &Array3<bool>, y: &Array3<bool>, spacing: [f32; 3]) -> Result<f64> {
    check_shapes(x, y)?;
    let nx = x.iter().filter(|&&v| v).count();
    let ny = y.iter().filter(|&&v| v).count();
    match (nx, ny) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(HD_EMPTY_SENTINEL_MM),
        _ => {}
    }
    let to_y = distance_sq_to_mask(y, spacing);
    let to_x = distance_sq_to_mask(x, spacing);
    Ok(directed_p95(x, &to_y).max(directed_p95(y, &to_x)))
}

/// Sensitivity TP/(TP+FN) and specificity TN/(TN+FP) over the domain
/// mask. Empty ground truth: sensitivity is 1 if the prediction is also
/// empty, else 0. No negatives in the domain: specificity 1.
pub fn sensitivity_specificity(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    domain: &Array3<bool>,
) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    check_shapes(pred, domain)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for ((&p, &g), &d) in pred.iter().zip(gt.iter()).zip(domain.iter()) {
        if !d {
            continue;
        }
        match (p, g) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let sens = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let spec = if tn + fp == 0 {
        1.0
    } else {
        tn as f64 / (tn + fp) as f64
    };
    Ok((sens, spec))
}

/// Metrics at one uncertainty threshold.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FilteredPoint {
    pub dice: f64,
    pub ftp: f64,
    pub ftn: f64,
}

/// Evaluates prediction vs ground truth keeping only voxels with
/// uncertainty <= T. `domain` bounds the true-negative population
/// (typically the brain mask). FTP/FTN are the fractions of unfiltered
/// true positives/negatives removed by the threshold.
pub fn filtered_point(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    unc: &UncertaintyMap,
    t: u8,
    domain: &Array3<bool>,
) -> Result<FilteredPoint> {
    check_shapes(pred, gt)?;
    if unc.values().dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "uncertainty shape {:?} vs mask {:?}",
            unc.values().dim(),
            pred.dim()
        )));
    }
    if t > 100 {
        return Err(Error::Range(format!("threshold {t} outside [0, 100]")));
    }
    let mut inter_kept = 0usize;
    let mut pred_kept = 0usize;
    let mut gt_kept = 0usize;
    let mut tp_all = 0usize;
    let mut tp_kept = 0usize;
    let mut tn_all = 0usize;
    let mut tn_kept = 0usize;
    for (((&p, &g), &u), &d) in pred
        .iter()
        .zip(gt.iter())
        .zip(unc.values().iter())
        .zip(domain.iter())
    {
        let keep = u <= t;
        if p && g {
            tp_all += 1;
            if keep {
                tp_kept += 1;
            }
        }
        if !p && !g && d {
            tn_all += 1;
            if keep {
                tn_kept += 1;
            }
        }
        if keep {
            pred_kept += p as usize;
            gt_kept += g as usize;
            inter_kept += (p && g) as usize;
        }
    }
    let dice = if pred_kept == 0 && gt_kept == 0 {
        1.0
    } else {
        2.0 * inter_kept as f64 / (pred_kept + gt_kept) as f64
    };
    let ftp = if tp_all == 0 {
        0.0
    } else {
        (tp_all - tp_kept) as f64 / tp_all as f64
    };
    let ftn = if tn_all == 0 {
        0.0
    } else {
        (tn_all - tn_kept) as f64 / tn_all as f64
    };
    Ok(FilteredPoint { dice, ftp, ftn })
}

/// Area-under-curve scores over the threshold sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UncertaintyScores {
    pub dice_auc: f64,
    pub ftp_auc: f64,
    pub ftn_auc: f64,
    pub integrated: f64,
}

/// Default threshold grid step.
pub const DEFAULT_THRESHOLD_STEP: u8 = 5;

/// Sweeps T over {0, step, ..., 100}, integrates each curve with the
/// trapezoidal rule over T/100, and combines them into the integrated
/// score dice_auc + (1 - ftp_auc) + (1 - ftn_auc).
pub fn auc_sweep(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    unc: &UncertaintyMap,
    domain: &Array3<bool>,
    step: u8,
) -> Result<UncertaintyScores> {
    if step == 0 || 100 % step != 0 {
        return Err(Error::Config(format!("threshold step {step} must divide 100")));
    }
    let thresholds: Vec<u8> = (0..=100).step_by(step as usize).collect();
    let points: Vec<FilteredPoint> = thresholds
        .iter()
        .map(|&t| filtered_point(pred, gt, unc, t, domain))
        .collect::<Result<_>>()?;
    let trapezoid = |f: &dyn Fn(&FilteredPoint) -> f64| -> f64 {
        let mut auc = 0.0;
        for i in 1..points.len() {
            let dx = (thresholds[i] - thresholds[i - 1]) as f64 / 100.0;
            auc += 0.5 * (f(&points[i]) + f(&points[i - 1])) * dx;
        }
        auc
    };
    let dice_auc = trapezoid(&|p| p.dice);
    let ftp_auc = trapezoid(&|p| p.ftp);
    let ftn_auc = trapezoid(&|p| p.ftn);
    Ok(UncertaintyScores {
        dice_auc,
        ftp_auc,
        ftn_auc,
        integrated: dice_auc + (1.0 - ftp_auc) + (1.0 - ftn_auc),
    })
}

/// Segmentation metrics of one region.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegionScores {
    pub dice: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Per-case evaluation over the three nested regions, with uncertainty
/// scores when maps are available.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub case_id: String,
    pub regions: Vec<(Region, RegionScores)>,
    pub uncertainty: Vec<(Region, UncertaintyScores)>,
}

/// Evaluates one case. `unc_for` supplies the uncertainty map for a
/// region (a global map may serve all three).
pub fn evaluate_case<'a>(
    case_id: &str,
    pred: &crate::volume::RegionMasks,
    gt: &crate::volume::RegionMasks,
    brain_mask: &Array3<bool>,
    spacing: [f32; 3],
    mut unc_for: impl FnMut(Region) -> Option<&'a UncertaintyMap>,
    threshold_step: u8,
) -> Result<EvalReport> {
    let mut regions = Vec::new();
    let mut uncertainty = Vec::new();
    for region in Region::EVAL {
        let p = pred.get(region);
        let g = gt.get(region);
        let (sens, spec) = sensitivity_specificity(p, g, brain_mask)?;
        regions.push((
            region,
            RegionScores {
                dice: dice(p, g)?,
                hd95: hd95(p, g, spacing)?,
                sensitivity: sens,
                specificity: spec,
            },
        ));
        if let Some(unc) = unc_for(region) {
            uncertainty.push((region, auc_sweep(p, g, unc, brain_mask, threshold_step)?));
        }
    }
    Ok(EvalReport {
        case_id: case_id.to_string(),
        regions,
        uncertainty,
    })
}
