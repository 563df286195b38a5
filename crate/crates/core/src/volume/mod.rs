//! Data model for multi-modal volumes: cases, label maps, nested
//! evaluation regions and synthetic phantoms.
//!
//! Label convention: 0 background, 1 necrotic/non-enhancing core,
//! 2 edema, 4 enhancing tumor. The three nested evaluation regions are
//! derived from those labels: whole tumor {1,2,4}, tumor core {1,4},
//! enhancing tumor {4}.

pub mod io;
pub mod nifti;
pub mod phantom;

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};

/// The four MRI channels of a case, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Flair,
    T1,
    T1ce,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    /// Base file name used by the raw+json case layout.
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

/// Valid voxel labels.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Labels considered tumor (non-background).
pub const TUMOR_LABELS: [u8; 3] = [1, 2, 4];

/// Integer label volume over {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    voxels: Array3<u8>,
}

impl LabelMap {
    /// Validates that every voxel carries a legal label.
    pub fn new(voxels: Array3<u8>) -> Result<Self> {
        if let Some(bad) = voxels.iter().find(|v| !LABEL_VALUES.contains(v)) {
            return Err(Error::Format(format!(
                "label value {bad} outside {{0,1,2,4}}"
            )));
        }
        Ok(LabelMap { voxels })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        LabelMap {
            voxels: Array3::zeros(shape),
        }
    }

    pub fn voxels(&self) -> &Array3<u8> {
        &self.voxels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    /// Binary mask of all tumor voxels (label != 0).
    pub fn foreground(&self) -> Array3<bool> {
        self.voxels.mapv(|v| v != 0)
    }
}

/// One of the nested evaluation regions, or the whole-volume scope used
/// by global (entropy) uncertainty maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Wt,
    Tc,
    Et,
    Global,
}

impl Region {
    pub const EVAL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "wt",
            Region::Tc => "tc",
            Region::Et => "et",
            Region::Global => "global",
        }
    }

    /// Whether `label` belongs to this region. `Global` covers every
    /// non-background label.
    pub fn contains_label(self, label: u8) -> bool {
        match self {
            Region::Wt | Region::Global => label != 0,
            Region::Tc => label == 1 || label == 4,
            Region::Et => label == 4,
        }
    }
}

/// The three nested binary evaluation regions of one case.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub wt: Array3<bool>,
    pub tc: Array3<bool>,
    pub et: Array3<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &Array3<bool> {
        match region {
            Region::Wt | Region::Global => &self.wt,
            Region::Tc => &self.tc,
            Region::Et => &self.et,
        }
    }
}

/// Decomposes a label map into the nested regions wt ⊇ tc ⊇ et.
pub fn regions_from_labels(labels: &LabelMap) -> RegionMasks {
    let v = labels.voxels();
    RegionMasks {
        wt: v.mapv(|l| Region::Wt.contains_label(l)),
        tc: v.mapv(|l| Region::Tc.contains_label(l)),
        et: v.mapv(|l| Region::Et.contains_label(l)),
    }
}

/// Extracts one region from a label map as a binary mask.
pub fn region_mask(labels: &LabelMap, region: Region) -> Array3<bool> {
    labels.voxels().mapv(|l| region.contains_label(l))
}

/// Voxel-wise uncertainty, integers in [0, 100]: 0 is most certain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UncertaintyMap {
    values: Array3<u8>,
    region: Region,
}

impl UncertaintyMap {
    pub fn new(values: Array3<u8>, region: Region) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v > 100) {
            return Err(Error::Range(format!(
                "uncertainty value {bad} outside [0, 100]"
            )));
        }
        Ok(UncertaintyMap { values, region })
    }

    pub fn values(&self) -> &Array3<u8> {
        &self.values
    }

    pub fn region(&self) -> Region {
        self.region
    }
}

/// A 4-channel scalar volume with optional ground truth.
///
/// Modalities are stored as `(4, D, H, W)` in [`Modality::ALL`] order.
/// The brain mask marks voxels where any modality is nonzero.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub modalities: Array4<f32>,
    pub brain_mask: Array3<bool>,
    pub labels: Option<LabelMap>,
    /// Voxel spacing in mm, per spatial axis.
    pub spacing: [f32; 3],
}

impl Case {
    /// Builds a case from raw modalities, deriving the brain mask and
    /// validating shape consistency.
    pub fn new(
        id: String,
        modalities: Array4<f32>,
        labels: Option<LabelMap>,
        spacing: [f32; 3],
    ) -> Result<Self> {
        let (c, d, h, w) = modalities.dim();
        if c != 4 {
            return Err(Error::Shape(format!("expected 4 modalities, got {c}")));
        }
        if let Some(ref l) = labels {
            if l.shape() != (d, h, w) {
                return Err(Error::Shape(format!(
                    "label shape {:?} != modality shape {:?}",
                    l.shape(),
                    (d, h, w)
                )));
            }
        }
        let brain_mask = brain_mask_of(&modalities);
        Ok(Case {
            id,
            modalities,
            brain_mask,
            labels,
            spacing,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.modalities.dim();
        (d, h, w)
    }
}

/// A voxel is brain if any modality is nonzero there.
pub fn brain_mask_of(modalities: &Array4<f32>) -> Array3<bool> {
    let (_, d, h, w) = modalities.dim();
    let mut mask = Array3::from_elem((d, h, w), false);
    for ch in modalities.axis_iter(Axis(0)) {
        ndarray::Zip::from(&mut mask).and(&ch).for_each(|m, &v| {
            if v != 0.0 {
                *m = true;
            }
        });
    }
    mask
}
