//! Intensity normalization.
//!
//! Each modality is normalized independently to zero mean and unit
//! standard deviation over its nonzero voxels; background voxels (exact
//! zero) are left untouched. Statistics use the population (1/N) std.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::volume::Case;

/// Normalizes every modality of a case in place and returns it.
pub fn normalize_case(mut case: Case) -> Result<Case> {
    for (i, mut ch) in case.modalities.axis_iter_mut(Axis(0)).enumerate() {
        // Nonzero support is tested on the raw stored intensity.
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for &v in ch.iter() {
            if v != 0.0 {
                n += 1;
                sum += v as f64;
            }
        }
        if n < 2 {
            return Err(Error::DegenerateInput(format!(
                "modality {i}: fewer than 2 nonzero voxels"
            )));
        }
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        for &v in ch.iter() {
            if v != 0.0 {
                let d = v as f64 - mean;
                ss += d * d;
            }
        }
        let std = (ss / n as f64).sqrt();
        if std == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "modality {i}: constant nonzero region"
            )));
        }
        let (mean, std) = (mean as f32, std as f32);
        ch.mapv_inplace(|v| if v != 0.0 { (v - mean) / std } else { 0.0 });
    }
    Ok(case)
}
