//! Synthetic phantom cases: nested-sphere tumors on a noisy ellipsoidal
//! brain. Stands in for real scan data so the full pipeline can run at
//! desk scale with known ground truth.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap};

/// Per-class Gaussian intensity profile, one (mean, std) pair per
/// modality in [`crate::volume::Modality::ALL`] order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassProfile {
    pub mean: [f32; 4],
    pub std: [f32; 4],
}

/// Intensity profiles for background-free brain tissue and the three
/// tumor classes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntensityProfiles {
    pub healthy: ClassProfile,
    pub ncr_net: ClassProfile,
    pub edema: ClassProfile,
    pub enhancing: ClassProfile,
}

impl IntensityProfiles {
    fn for_label(&self, label: u8) -> &ClassProfile {
        match label {
            1 => &self.ncr_net,
            2 => &self.edema,
            4 => &self.enhancing,
            _ => &self.healthy,
        }
    }
}

impl Default for IntensityProfiles {
    fn default() -> Self {
        // Modality order: FLAIR, T1, T1ce, T2. Contrasts loosely follow
        // the usual clinical appearance of each class.
        IntensityProfiles {
            healthy: ClassProfile {
                mean: [1.0, 1.0, 1.0, 1.0],
                std: [0.12; 4],
            },
            ncr_net: ClassProfile {
                mean: [1.3, 0.6, 0.5, 1.5],
                std: [0.12; 4],
            },
            edema: ClassProfile {
                mean: [1.9, 0.8, 0.9, 1.8],
                std: [0.12; 4],
            },
            enhancing: ClassProfile {
                mean: [1.5, 1.2, 2.1, 1.2],
                std: [0.12; 4],
            },
        }
    }
}

/// Recipe for one synthetic case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Volume shape (D, H, W), each component >= 16.
    pub shape: [usize; 3],
    /// Number of non-overlapping tumors.
    pub n_tumors: usize,
    /// Nested sphere radii in voxels, strictly decreasing wt > tc > et >= 0.
    /// A radius of exactly 0 produces an empty shell (no ET voxels).
    pub radii: [f32; 3],
    pub intensity_profiles: IntensityProfiles,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        // Two nested-sphere tumors of WT radius 9 on a 64^3 brain put the
        // tumor load at roughly 9% of brain voxels, inside the expected
        // 5-15% band.
        PhantomSpec {
            shape: [64, 64, 64],
            n_tumors: 2,
            radii: [9.0, 5.0, 3.0],
            intensity_profiles: IntensityProfiles::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 16) {
            return Err(Error::Spec(format!(
                "shape {:?} has a component < 16",
                self.shape
            )));
        }
        let [wt, tc, et] = self.radii;
        if !(wt > tc && tc > et && et >= 0.0) {
            return Err(Error::Spec(format!(
                "radii {:?} must satisfy wt > tc > et >= 0",
                self.radii
            )));
        }
        if self.n_tumors == 0 {
            return Err(Error::Spec("n_tumors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Semi-axes of the brain ellipsoid, as a fraction of the half-extent.
const BRAIN_AXIS_FRACTION: [f64; 3] = [0.84, 0.80, 0.76];

fn brain_semi_axes(shape: [usize; 3]) -> [f64; 3] {
    [
        BRAIN_AXIS_FRACTION[0] * shape[0] as f64 / 2.0,
        BRAIN_AXIS_FRACTION[1] * shape[1] as f64 / 2.0,
        BRAIN_AXIS_FRACTION[2] * shape[2] as f64 / 2.0,
    ]
}

fn inside_ellipsoid(p: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> bool {
    let mut s = 0.0;
    for i in 0..3 {
        let t = (p[i] - center[i]) / axes[i];
        s += t * t;
    }
    s <= 1.0
}

/// Generates a deterministic phantom case with ground-truth labels.
///
/// The labels are nested by construction: an ET core (label 4) inside a
/// TC shell (label 1) inside a WT shell (label 2).
pub fn make_phantom(spec: &PhantomSpec) -> Result<Case> {
    spec.validate()?;
    let [sd, sh, sw] = spec.shape;
    let center = [sd as f64 / 2.0, sh as f64 / 2.0, sw as f64 / 2.0];
    let axes = brain_semi_axes(spec.shape);
    let wt_r = spec.radii[0] as f64;

    // Tumor spheres must fit fully inside the brain ellipsoid. Scaling
    // every semi-axis by t = 1 - (wt_r + 1)/a_min guarantees that a
    // sphere of radius wt_r centered anywhere in the scaled ellipsoid
    // stays strictly inside the full one.
    let a_min = axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let t = 1.0 - (wt_r + 1.0) / a_min;
    if t <= 0.05 {
        return Err(Error::Spec(format!(
            "radii {:?} do not fit in shape {:?}",
            spec.radii, spec.shape
        )));
    }
    let shrunk = [axes[0] * t, axes[1] * t, axes[2] * t];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Place tumor centers by rejection sampling inside the shrunk
    // ellipsoid, keeping spheres pairwise disjoint.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(spec.n_tumors);
    let mut attempts = 0;
    while centers.len() < spec.n_tumors {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Spec(format!(
                "could not place {} tumors of WT radius {} in shape {:?}",
                spec.n_tumors, spec.radii[0], spec.shape
            )));
        }
        let cand = [
            center[0] + (rng.random::<f64>() * 2.0 - 1.0) * shrunk[0],
            center[1] + (rng.random::<f64>() * 2.0 - 1.0) * shrunk[1],
            center[2] + (rng.random::<f64>() * 2.0 - 1.0) * shrunk[2],
        ];
        if !inside_ellipsoid(cand, center, shrunk) {
            continue;
        }
        let too_close = centers.iter().any(|c| {
            let d2: f64 = (0..3).map(|i| (c[i] - cand[i]).powi(2)).sum();
            d2 < (2.0 * wt_r + 1.0).powi(2)
        });
        if !too_close {
            centers.push(cand);
        }
    }

    // Paint labels: innermost sphere wins. Radius 0 paints nothing.
    let mut labels = Array3::<u8>::zeros((sd, sh, sw));
    let radius2 = |r: f64| if r > 0.0 { r * r } else { -1.0 };
    let (wt2, tc2, et2) = (
        radius2(spec.radii[0] as f64),
        radius2(spec.radii[1] as f64),
        radius2(spec.radii[2] as f64),
    );
    for c in &centers {
        let lo = |x: f64| (x - wt_r - 1.0).max(0.0) as usize;
        let hi = |x: f64, n: usize| ((x + wt_r + 2.0) as usize).min(n);
        for d in lo(c[0])..hi(c[0], sd) {
            for h in lo(c[1])..hi(c[1], sh) {
                for w in lo(c[2])..hi(c[2], sw) {
                    let d2: f64 = (d as f64 - c[0]).powi(2)
                        + (h as f64 - c[1]).powi(2)
                        + (w as f64 - c[2]).powi(2);
                    let v = &mut labels[[d, h, w]];
                    if d2 <= et2 {
                        *v = 4;
                    } else if d2 <= tc2 {
                        *v = 1;
                    } else if d2 <= wt2 {
                        *v = 2;
                    }
                }
            }
        }
    }

    // Intensities: per-class Gaussian draws inside the brain, exact zero
    // outside. Draw order is fixed by the voxel scan so the case is a
    // pure function of the spec.
    let mut modalities = Array4::<f32>::zeros((4, sd, sh, sw));
    for d in 0..sd {
        for h in 0..sh {
            for w in 0..sw {
                let in_brain =
                    inside_ellipsoid([d as f64, h as f64, w as f64], center, axes);
                let profile = spec.intensity_profiles.for_label(labels[[d, h, w]]);
                for m in 0..4 {
                    let z: f32 = rng.sample(StandardNormal);
                    if in_brain {
                        modalities[[m, d, h, w]] = profile.mean[m] + profile.std[m] * z;
                    }
                }
            }
        }
    }

    // Voxels outside the brain must stay background-labelled.
    let case = Case::new(
        format!("phantom-{:05}", spec.seed),
        modalities,
        Some(LabelMap::new(labels)?),
        [1.0, 1.0, 1.0],
    )?;
    Ok(case)
}
