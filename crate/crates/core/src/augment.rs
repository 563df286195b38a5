//! Training-time augmentation and invertible test-time transforms.
//!
//! Spatial ops (axis flips, 90-degree rotations) apply to modalities and
//! labels alike and have exact inverses; intensity ops (per-channel shift
//! and scale, additive Gaussian noise) apply to modalities only. The
//! shift is expressed as a fraction of the channel's nonzero-voxel std,
//! the scale is a plain factor.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An invertible spatial operation on the (D, H, W) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialOp {
    Flip { axis: usize },
    /// k quarter-turns in the (axes.0, axes.1) plane; extents must match.
    Rot90 { axes: (usize, usize), k: u8 },
}

impl SpatialOp {
    fn inverse(self) -> SpatialOp {
        match self {
            SpatialOp::Flip { axis } => SpatialOp::Flip { axis },
            SpatialOp::Rot90 { axes, k } => SpatialOp::Rot90 {
                axes,
                k: (4 - k % 4) % 4,
            },
        }
    }
}

/// Additive Gaussian noise, sigma expressed as a fraction of each
/// channel's nonzero std. Carries its own seed so a transform replays
/// identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_factor: f32,
    pub seed: u64,
}

/// A sampled augmentation: ordered spatial ops then intensity ops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub spatial: Vec<SpatialOp>,
    /// Per-channel shift factors (fraction of channel std); None = no shift.
    pub shift: Option<[f32; 4]>,
    /// Per-channel scale factors; None = no scale.
    pub scale: Option<[f32; 4]>,
    pub noise: Option<NoiseSpec>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            spatial: Vec::new(),
            shift: None,
            scale: None,
            noise: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.spatial.is_empty()
            && self.shift.is_none()
            && self.scale.is_none()
            && self.noise.is_none()
    }

    /// The inverse of the spatial subsequence (intensity ops dropped):
    /// composing it after the forward transform is the identity on any
    /// label map.
    pub fn inverse_spatial(&self) -> Transform {
        Transform {
            spatial: self.spatial.iter().rev().map(|op| op.inverse()).collect(),
            shift: None,
            scale: None,
            noise: None,
        }
    }

    /// Applies the full transform to a 4-channel volume.
    pub fn apply_to_modalities(&self, m: &Array4<f32>) -> Result<Array4<f32>> {
        let mut out = m.clone();
        for op in &self.spatial {
            out = apply_spatial4(&out, *op)?;
        }
        let channel_stds: Vec<f32> = (0..4).map(|c| nonzero_std(&out, c)).collect();
        if let Some(shift) = self.shift {
            for c in 0..4 {
                let delta = shift[c] * channel_stds[c];
                out.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + delta);
            }
        }
        if let Some(scale) = self.scale {
            for c in 0..4 {
                let s = scale[c];
                out.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * s);
            }
        }
        if let Some(noise) = self.noise {
            if noise.sigma_factor > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
                for c in 0..4 {
                    let sigma = noise.sigma_factor * channel_stds[c];
                    for v in out.index_axis_mut(Axis(0), c).iter_mut() {
                        let z: f32 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Applies only the spatial subsequence; intensity ops never touch
    /// labels.
    pub fn apply_to_labels(&self, l: &Array3<u8>) -> Result<Array3<u8>> {
        let mut out = l.clone();
        for op in &self.spatial {
            out = apply_spatial3(&out, *op)?;
        }
        Ok(out)
    }
}

/// Applies a transform to a patch: modalities get everything, labels get
/// the spatial subsequence.
pub fn apply(
    transform: &Transform,
    modalities: &Array4<f32>,
    labels: Option<&Array3<u8>>,
) -> Result<(Array4<f32>, Option<Array3<u8>>)> {
    let m = transform.apply_to_modalities(modalities)?;
    let l = match labels {
        Some(l) => Some(transform.apply_to_labels(l)?),
        None => None,
    };
    Ok((m, l))
}

fn nonzero_std(m: &Array4<f32>, channel: usize) -> f32 {
    let ch = m.index_axis(Axis(0), channel);
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for &v in ch.iter() {
        if v != 0.0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for &v in ch.iter() {
        if v != 0.0 {
            let d = v as f64 - mean;
            ss += d * d;
        }
    }
    (ss / n as f64).sqrt() as f32
}

fn apply_spatial3<T: Clone + Default>(x: &Array3<T>, op: SpatialOp) -> Result<Array3<T>> {
    match op {
        SpatialOp::Flip { axis } => {
            if axis > 2 {
                return Err(Error::Shape(format!("flip axis {axis} out of range")));
            }
            let mut v = x.view();
            v.invert_axis(Axis(axis));
            Ok(v.as_standard_layout().into_owned())
        }
        SpatialOp::Rot90 { axes, k } => {
            let (a, b) = axes;
            if a > 2 || b > 2 || a == b {
                return Err(Error::Shape(format!("rot90 axes {axes:?} invalid")));
            }
            let dims = [x.dim().0, x.dim().1, x.dim().2];
            if dims[a] != dims[b] {
                return Err(Error::Shape(format!(
                    "rot90 axes {axes:?} have unequal extents {} and {}",
                    dims[a], dims[b]
                )));
            }
            let mut out = x.clone();
            for _ in 0..(k % 4) {
                out = rot90_once(&out, a, b);
            }
            Ok(out)
        }
    }
}

/// One counter-clockwise quarter turn in the (a, b) plane:
/// out[i_a, i_b] = in[i_b, n - 1 - i_a].
fn rot90_once<T: Clone + Default>(x: &Array3<T>, a: usize, b: usize) -> Array3<T> {
    let dim = x.dim();
    let dims = [dim.0, dim.1, dim.2];
    let n = dims[a];
    let mut out = Array3::<T>::default(dim);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let idx = [d, h, w];
                let mut src = idx;
                src[a] = idx[b];
                src[b] = n - 1 - idx[a];
                out[[d, h, w]] = x[[src[0], src[1], src[2]]].clone();
            }
        }
    }
    out
}

fn apply_spatial4(x: &Array4<f32>, op: SpatialOp) -> Result<Array4<f32>> {
    match op {
        SpatialOp::Flip { axis } => {
            if axis > 2 {
                return Err(Error::Shape(format!("flip axis {axis} out of range")));
            }
            let mut v = x.view();
            v.invert_axis(Axis(axis + 1));
            Ok(v.as_standard_layout().into_owned())
        }
        SpatialOp::Rot90 { .. } => {
            let mut out = Array4::<f32>::zeros(x.dim());
            for c in 0..x.dim().0 {
                let ch = x.index_axis(Axis(0), c).to_owned();
                let rotated = apply_spatial3(&ch, op)?;
                out.index_axis_mut(Axis(0), c).assign(&rotated);
            }
            Ok(out)
        }
    }
}

/// Sampling ranges for augmentation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Axes pair for the 90-degree rotation; in-plane (H, W) by default.
    pub rot_axes: (usize, usize),
    /// Shift range as a fraction of channel std: delta ~ U(-r, r).
    pub shift_range: f32,
    pub scale_lo: f32,
    pub scale_hi: f32,
    /// TTA noise sigma as a fraction of channel std.
    pub noise_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_axes: (1, 2),
            shift_range: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
            noise_sigma: 0.1,
        }
    }
}

/// Draws a training transform: each axis flip with p = 0.5, one 90-degree
/// rotation with p = 0.5, and per-channel shift and scale.
pub fn sample_train_transform(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Transform {
    let mut spatial = Vec::new();
    for axis in 0..3 {
        if rng.random_bool(0.5) {
            spatial.push(SpatialOp::Flip { axis });
        }
    }
    if rng.random_bool(0.5) {
        spatial.push(SpatialOp::Rot90 {
            axes: cfg.rot_axes,
            k: 1,
        });
    }
    let mut shift = [0.0f32; 4];
    let mut scale = [1.0f32; 4];
    for c in 0..4 {
        shift[c] = rng.random_range(-cfg.shift_range..=cfg.shift_range);
        scale[c] = rng.random_range(cfg.scale_lo..=cfg.scale_hi);
    }
    Transform {
        spatial,
        shift: Some(shift),
        scale: Some(scale),
        noise: None,
    }
}

/// A test-time transform and the inverse that realigns predictions with
/// the original grid.
#[derive(Debug, Clone)]
pub struct TtaTransform {
    pub forward: Transform,
    pub inverse: Transform,
}

/// Draws a TTA transform: the training ops plus additive Gaussian noise.
pub fn sample_tta_transform(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> TtaTransform {
    let mut forward = sample_train_transform(cfg, rng);
    forward.noise = Some(NoiseSpec {
        sigma_factor: cfg.noise_sigma,
        seed: rng.random::<u64>(),
    });
    let inverse = forward.inverse_spatial();
    TtaTransform { forward, inverse }
}
