//! Full-volume prediction from patch-trained networks: overlapping
//! sliding-window tiling with voxel-wise softmax averaging, model
//! ensembling, argmax label extraction and connected-component
//! post-processing.

use ndarray::{Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{channel_to_label, Mode, Network};
use crate::volume::{Case, LabelMap};

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy)]
pub struct TileConfig {
    pub patch_size: usize,
    /// Fractional overlap between neighboring tiles, in [0, 0.9].
    pub overlap: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            patch_size: 32,
            overlap: 0.5,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 0.9]",
                self.overlap
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Tile start positions covering [0, extent) with the requested stride;
/// the final tile is clamped so every voxel is covered.
fn tile_positions(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    debug_assert!(patch <= extent);
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut positions = Vec::new();
    let last = extent - patch;
    let mut p = 0usize;
    loop {
        positions.push(p.min(last));
        if p >= last {
            break;
        }
        p += stride;
    }
    positions.dedup();
    positions
}

/// Runs `tile_softmax` over a sliding-window tiling of `modalities` and
/// averages overlapping softmax predictions voxel-wise.
///
/// Volumes smaller than the patch are zero padded up to the patch size,
/// then the output is cropped back.
pub fn sliding_window_softmax<F>(
    modalities: &Array4<f32>,
    tile: &TileConfig,
    mut tile_softmax: F,
) -> Result<Array4<f32>>
where
    F: FnMut(&Array4<f32>) -> Result<Array4<f32>>,
{
    tile.validate()?;
    let (c, d, h, w) = modalities.dim();
    let p = tile.patch_size;
    if d < p || h < p || w < p {
        // Pad at the high side, predict, crop.
        let (pd, ph, pw) = (d.max(p), h.max(p), w.max(p));
        let mut padded = Array4::<f32>::zeros((c, pd, ph, pw));
        padded
            .slice_mut(ndarray::s![.., ..d, ..h, ..w])
            .assign(modalities);
        let full = sliding_window_softmax(&padded, tile, tile_softmax)?;
        return Ok(full.slice(ndarray::s![.., ..d, ..h, ..w]).to_owned());
    }

    let mut sum = Array4::<f32>::zeros((4, d, h, w));
    let mut count = Array3::<f32>::zeros((d, h, w));
    for &pd in &tile_positions(d, p, tile.overlap) {
        for &ph in &tile_positions(h, p, tile.overlap) {
            for &pw in &tile_positions(w, p, tile.overlap) {
                let input = modalities
                    .slice(ndarray::s![.., pd..pd + p, ph..ph + p, pw..pw + p])
                    .to_owned();
                let soft = tile_softmax(&input)?;
                if soft.dim() != (4, p, p, p) {
                    return Err(Error::Shape(format!(
                        "tile softmax returned {:?}, expected (4, {p}, {p}, {p})",
                        soft.dim()
                    )));
                }
                let mut dst =
                    sum.slice_mut(ndarray::s![.., pd..pd + p, ph..ph + p, pw..pw + p]);
                dst += &soft;
                let mut cnt =
                    count.slice_mut(ndarray::s![pd..pd + p, ph..ph + p, pw..pw + p]);
                cnt += 1.0;
            }
        }
    }
    for mut ch in sum.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut ch).and(&count).for_each(|s, &n| *s /= n);
    }
    Ok(sum)
}

/// Deterministic full-volume softmax prediction.
pub fn predict_volume(net: &Network, case: &Case, tile: &TileConfig) -> Result<Array4<f32>> {
    sliding_window_softmax(&case.modalities, tile, |x| net.predict_softmax(x))
}

/// Full-volume softmax with dropout active on every tile forward pass.
pub fn predict_volume_dropout(
    net: &Network,
    modalities: &Array4<f32>,
    tile: &TileConfig,
    dropout_p: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f32>> {
    sliding_window_softmax(modalities, tile, |x| {
        let pass = net.forward(
            x,
            Mode::EvalWithDropout {
                dropout_p,
                rng,
            },
        )?;
        Ok(pass.graph.value(pass.softmax).clone())
    })
}

/// Voxel-wise arithmetic mean of softmax volumes.
pub fn ensemble_mean(softmaxes: &[Array4<f32>]) -> Result<Array4<f32>> {
    let first = softmaxes
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one volume".into()))?;
    for s in softmaxes {
        if s.dim() != first.dim() {
            return Err(Error::Shape(format!(
                "ensemble shapes differ: {:?} vs {:?}",
                s.dim(),
                first.dim()
            )));
        }
    }
    let mut out = first.clone();
    for s in &softmaxes[1..] {
        out += s;
    }
    out.mapv_inplace(|v| v / softmaxes.len() as f32);
    Ok(out)
}

/// Per-voxel argmax over channels, ties broken toward the lower channel
/// index (so toward label 0).
pub fn labels_from_softmax(softmax: &Array4<f32>) -> LabelMap {
    let (c, d, h, w) = softmax.dim();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let mut best_c = 0usize;
                let mut best = softmax[[0, di, hi, wi]];
                for ci in 1..c {
                    let v = softmax[[ci, di, hi, wi]];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out[[di, hi, wi]] = channel_to_label(best_c);
            }
        }
    }
    LabelMap::new(out).expect("channel labels are valid")
}

/// Foreground connected components under 26-connectivity, largest first.
/// Returns (component id per voxel or 0, sizes ordered by rank).
fn connected_components(foreground: &Array3<bool>) -> (Array3<u32>, Vec<usize>) {
    let (d, h, w) = foreground.dim();
    let mut comp = Array3::<u32>::zeros((d, h, w));
    let mut sizes = Vec::new();
    let mut next_id = 0u32;
    let mut stack = Vec::new();
    for sd in 0..d {
        for sh in 0..h {
            for sw in 0..w {
                if !foreground[[sd, sh, sw]] || comp[[sd, sh, sw] ] != 0 {
                    continue;
                }
                next_id += 1;
                let mut size = 0usize;
                stack.push((sd, sh, sw));
                comp[[sd, sh, sw]] = next_id;
                while let Some((cd, ch, cw)) = stack.pop() {
                    size += 1;
                    for dd in -1i32..=1 {
                        for dh in -1i32..=1 {
                            for dw in -1i32..=1 {
                                if dd == 0 && dh == 0 && dw == 0 {
                                    continue;
                                }
                                let (nd, nh, nw) = (
                                    cd as i32 + dd,
                                    ch as i32 + dh,
                                    cw as i32 + dw,
                                );
                                if nd < 0
                                    || nh < 0
                                    || nw < 0
                                    || nd >= d as i32
                                    || nh >= h as i32
                                    || nw >= w as i32
                                {
                                    continue;
                                }
                                let idx = [nd as usize, nh as usize, nw as usize];
                                if foreground[idx] && comp[idx] == 0 {
                                    comp[idx] = next_id;
                                    stack.push((idx[0], idx[1], idx[2]));
                                }
                            }
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    (comp, sizes)
}

/// Keeps the largest foreground component, plus the second largest when
/// its size is at least `ratio_threshold` of the largest; every other
/// component is set to background. Surviving voxels keep their labels.
pub fn postprocess_components(labels: &LabelMap, ratio_threshold: f64) -> Result<LabelMap> {
    if !(ratio_threshold > 0.0 && ratio_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "ratio_threshold {ratio_threshold} outside (0, 1]"
        )));
    }
    let foreground = labels.foreground();
    let (comp, sizes) = connected_components(&foreground);
    if sizes.len() <= 1 {
        return Ok(labels.clone());
    }
    // Rank component ids by size, descending; discovery order breaks ties.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let largest = order[0];
    let second = order[1];
    let mut keep = vec![false; sizes.len() + 1];
    keep[largest + 1] = true;
    if sizes[second] as f64 / sizes[largest] as f64 >= ratio_threshold {
        keep[second + 1] = true;
    }
    let mut out = labels.voxels().clone();
    ndarray::Zip::from(&mut out).and(&comp).for_each(|v, &c| {
        if c != 0 && !keep[c as usize] {
            *v = 0;
        }
    });
    LabelMap::new(out)
}

/// Replaces all enhancing-tumor voxels with necrosis when the total ET
/// count is below `voxel_threshold`. Threshold 0 disables the rule.
pub fn relabel_small_et(labels: &LabelMap, voxel_threshold: usize) -> LabelMap {
    let et_count = labels.voxels().iter().filter(|&&v| v == 4).count();
    if et_count >= voxel_threshold {
        return labels.clone();
    }
    let out = labels.voxels().mapv(|v| if v == 4 { 1 } else { v });
    LabelMap::new(out).expect("relabeling stays in the valid set")
}

/// Mean whole-tumor Dice over cases for each candidate ratio threshold;
/// used by the post-processing calibration command.
pub fn calibrate_ratio_threshold(
    predictions: &[LabelMap],
    ground_truths: &[LabelMap],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if predictions.len() != ground_truths.len() || predictions.is_empty() {
        return Err(Error::Config(
            "calibration needs equal, nonempty prediction/truth lists".into(),
        ));
    }
    let mut results = Vec::new();
    for &t in thresholds {
        let mut total = 0.0;
        for (pred, gt) in predictions.iter().zip(ground_truths.iter()) {
            let cleaned = postprocess_components(pred, t)?;
            let dice = crate::metrics::dice(&cleaned.foreground(), &gt.foreground())?;
            total += dice;
        }
        results.push((t, total / predictions.len() as f64));
    }
    Ok(results)
}
