//! Patch-center sampling and patch extraction.
//!
//! Two center distributions are provided: `binary` draws the center from
//! tumor and healthy-brain tissue with equal probability (intended for
//! patches of 64^3 or below), `random_tumor` always centers on tumor
//! (intended for large patches, 112^3/128^3, which already see plenty of
//! healthy context). Patches crossing the volume border are zero padded.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap};

/// Center-selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Binary,
    RandomTumor,
}

/// Patch geometry plus sampling strategy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub strategy: SamplingStrategy,
    pub rng_seed: u64,
}

impl PatchSpec {
    pub fn cubic(side: usize, strategy: SamplingStrategy, rng_seed: u64) -> Self {
        PatchSpec {
            size: [side; 3],
            strategy,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 8 || s % 2 != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} components must be even and >= 8",
                self.size
            )));
        }
        Ok(())
    }

    /// The pairing rule between patch size and strategy: small patches
    /// (<= 64 per side) go with `binary`, large ones with `random_tumor`.
    /// A mismatch is legal but worth flagging.
    pub fn strategy_mismatch_warning(&self) -> Option<String> {
        let small = self.size.iter().all(|&s| s <= 64);
        match (small, self.strategy) {
            (false, SamplingStrategy::Binary) => Some(format!(
                "patch size {:?} > 64^3 normally pairs with random_tumor",
                self.size
            )),
            _ => None,
        }
    }
}

/// Per-label voxel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub background: usize,
    pub ncr_net: usize,
    pub edema: usize,
    pub enhancing: usize,
}

impl ClassHistogram {
    pub fn count(&self, label: u8) -> usize {
        match label {
            0 => self.background,
            1 => self.ncr_net,
            2 => self.edema,
            4 => self.enhancing,
            _ => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.background + self.ncr_net + self.edema + self.enhancing
    }
}

/// Tallies the label distribution of a map.
pub fn class_distribution(labels: &LabelMap) -> ClassHistogram {
    let mut h = ClassHistogram {
        background: 0,
        ncr_net: 0,
        edema: 0,
        enhancing: 0,
    };
    for &v in labels.voxels().iter() {
        match v {
            0 => h.background += 1,
            1 => h.ncr_net += 1,
            2 => h.edema += 1,
            4 => h.enhancing += 1,
            _ => unreachable!("LabelMap invariant"),
        }
    }
    h
}

/// Precomputed center strata for one case, for repeated drawing.
pub struct StratifiedSampler {
    tumor: Vec<[usize; 3]>,
    healthy: Vec<[usize; 3]>,
}

impl StratifiedSampler {
    /// `healthy` is label 0 restricted to the brain mask; `tumor` is any
    /// voxel with label in {1, 2, 4}.
    pub fn new(labels: &LabelMap, brain_mask: &Array3<bool>) -> Self {
        let mut tumor = Vec::new();
        let mut healthy = Vec::new();
        for ((d, h, w), &v) in labels.voxels().indexed_iter() {
            if v != 0 {
                tumor.push([d, h, w]);
            } else if brain_mask[[d, h, w]] {
                healthy.push([d, h, w]);
            }
        }
        StratifiedSampler { tumor, healthy }
    }

    pub fn sample_binary(&self, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
        if self.tumor.is_empty() {
            return Err(Error::Sampling("no tumor voxels to center on".into()));
        }
        if self.healthy.is_empty() {
            return Err(Error::Sampling("no healthy brain voxels to center on".into()));
        }
        let stratum = if rng.random_bool(0.5) {
            &self.tumor
        } else {
            &self.healthy
        };
        Ok(stratum[rng.random_range(0..stratum.len())])
    }

    pub fn sample_tumor(&self, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
        if self.tumor.is_empty() {
            return Err(Error::Sampling("no tumor voxels to center on".into()));
        }
        Ok(self.tumor[rng.random_range(0..self.tumor.len())])
    }

    pub fn sample(&self, strategy: SamplingStrategy, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
        match strategy {
            SamplingStrategy::Binary => self.sample_binary(rng),
            SamplingStrategy::RandomTumor => self.sample_tumor(rng),
        }
    }
}

/// One-shot binary draw; builds the strata on the fly.
pub fn sample_center_binary(
    labels: &LabelMap,
    brain_mask: &Array3<bool>,
    rng: &mut ChaCha8Rng,
) -> Result<[usize; 3]> {
    StratifiedSampler::new(labels, brain_mask).sample_binary(rng)
}

/// One-shot tumor-centered draw.
pub fn sample_center_tumor(labels: &LabelMap, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
    let tumor: Vec<[usize; 3]> = labels
        .voxels()
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((d, h, w), _)| [d, h, w])
        .collect();
    if tumor.is_empty() {
        return Err(Error::Sampling("no tumor voxels to center on".into()));
    }
    Ok(tumor[rng.random_range(0..tumor.len())])
}

/// A patch cut from a case: modalities and, when present, labels.
pub struct Patch {
    pub modalities: Array4<f32>,
    pub labels: Option<Array3<u8>>,
    pub center: [usize; 3],
}

/// Extracts a patch of `size` centered on `center` (offset floor(size/2)).
/// Regions outside the volume are zero padded.
pub fn extract_patch(case: &Case, center: [usize; 3], size: [usize; 3]) -> Patch {
    let (vd, vh, vw) = case.shape();
    let vol = [vd, vh, vw];
    // Signed start of the patch in volume coordinates.
    let start: [isize; 3] = [
        center[0] as isize - (size[0] / 2) as isize,
        center[1] as isize - (size[1] / 2) as isize,
        center[2] as isize - (size[2] / 2) as isize,
    ];
    // Overlap between patch box and volume, in both coordinate systems.
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        let lo = start[a].max(0) as usize;
        let hi = (start[a] + size[a] as isize).min(vol[a] as isize).max(0) as usize;
        src_lo[a] = lo.min(vol[a]);
        len[a] = hi.saturating_sub(src_lo[a]);
        dst_lo[a] = (src_lo[a] as isize - start[a]) as usize;
    }

    let mut modalities = Array4::<f32>::zeros((4, size[0], size[1], size[2]));
    if len.iter().all(|&l| l > 0) {
        let src = case.modalities.slice(ndarray::s![
            ..,
            src_lo[0]..src_lo[0] + len[0],
            src_lo[1]..src_lo[1] + len[1],
            src_lo[2]..src_lo[2] + len[2]
        ]);
        modalities
            .slice_mut(ndarray::s![
                ..,
                dst_lo[0]..dst_lo[0] + len[0],
                dst_lo[1]..dst_lo[1] + len[1],
                dst_lo[2]..dst_lo[2] + len[2]
            ])
            .assign(&src);
    }

    let labels = case.labels.as_ref().map(|lm| {
        let mut out = Array3::<u8>::zeros((size[0], size[1], size[2]));
        if len.iter().all(|&l| l > 0) {
            let src = lm.voxels().slice(ndarray::s![
                src_lo[0]..src_lo[0] + len[0],
                src_lo[1]..src_lo[1] + len[1],
                src_lo[2]..src_lo[2] + len[2]
            ]);
            out.slice_mut(ndarray::s![
                dst_lo[0]..dst_lo[0] + len[0],
                dst_lo[1]..dst_lo[1] + len[1],
                dst_lo[2]..dst_lo[2] + len[2]
            ])
            .assign(&src);
        }
        out
    });

    Patch {
        modalities,
        labels,
        center,
    }
}

/// Writes patch modalities back into a volume at the same center,
/// clipping at the border. Inverse of [`extract_patch`] on the overlap.
pub fn embed_patch(volume: &mut Array4<f32>, patch: &Array4<f32>, center: [usize; 3]) {
    let (_, vd, vh, vw) = volume.dim();
    let vol = [vd, vh, vw];
    let (_, pd, ph, pw) = patch.dim();
    let size = [pd, ph, pw];
    let start: [isize; 3] = [
        center[0] as isize - (size[0] / 2) as isize,
        center[1] as isize - (size[1] / 2) as isize,
        center[2] as isize - (size[2] / 2) as isize,
    ];
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        let lo = start[a].max(0) as usize;
        let hi = (start[a] + size[a] as isize).min(vol[a] as isize).max(0) as usize;
        dst_lo[a] = lo.min(vol[a]);
        len[a] = hi.saturating_sub(dst_lo[a]);
        src_lo[a] = (dst_lo[a] as isize - start[a]) as usize;
    }
    if len.iter().any(|&l| l == 0) {
        return;
    }
    let src = patch.slice(ndarray::s![
        ..,
        src_lo[0]..src_lo[0] + len[0],
        src_lo[1]..src_lo[1] + len[1],
        src_lo[2]..src_lo[2] + len[2]
    ]);
    volume
        .slice_mut(ndarray::s![
            ..,
            dst_lo[0]..dst_lo[0] + len[0],
            dst_lo[1]..dst_lo[1] + len[1],
            dst_lo[2]..dst_lo[2] + len[2]
        ])
        .assign(&src);
}
