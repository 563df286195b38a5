//! Minimal NIfTI-1 reader for real scan data.
//!
//! Reads uncompressed single-file `.nii` volumes (magic `n+1`), honoring
//! endianness, the common scalar datatypes and scl slope/intercept.
//! Volumes are returned as `(z, y, x)` arrays so the fastest-varying
//! NIfTI axis stays the fastest-varying array axis.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap};

#[derive(Debug)]
pub struct NiftiVolume {
    pub data: Array3<f32>,
    /// Spacing per array axis (z, y, x) in mm.
    pub spacing: [f32; 3],
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> HeaderReader<'a> {
    fn u16_at(&self, off: usize) -> u16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        let v = u16::from_le_bytes(b);
        if self.swap {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn i16_at(&self, off: usize) -> i16 {
        self.u16_at(off) as i16
    }

    fn f32_at(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.swap {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

const HEADER_LEN: usize = 348;

/// Reads one uncompressed NIfTI-1 volume.
pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::Format(format!(
            "{}: gzip-compressed NIfTI is not supported, decompress it first",
            path.display()
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{}: shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    // sizeof_hdr must be 348; its byte order reveals the file's.
    let sizeof_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let swap = match sizeof_le {
        348 => false,
        _ if sizeof_le.swap_bytes() == 348 => true,
        _ => {
            return Err(Error::Format(format!(
                "{}: not a NIfTI-1 file (sizeof_hdr = {sizeof_le})",
                path.display()
            )))
        }
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format(format!(
            "{}: only single-file n+1 NIfTI is supported",
            path.display()
        )));
    }
    let h = HeaderReader {
        bytes: &bytes,
        swap,
    };
    let ndim = h.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!(
            "{}: bad dim[0] = {ndim}",
            path.display()
        )));
    }
    let nx = h.i16_at(42).max(1) as usize;
    let ny = h.i16_at(44).max(1) as usize;
    let nz = h.i16_at(46).max(1) as usize;
    // Trailing dims must be singleton: only scalar 3D volumes supported.
    for d in 4..=(ndim as usize) {
        let extent = h.i16_at(40 + 2 * d).max(1);
        if extent != 1 {
            return Err(Error::Format(format!(
                "{}: dim[{d}] = {extent}, only scalar 3D volumes supported",
                path.display()
            )));
        }
    }
    let datatype = h.i16_at(70);
    let vox_offset = h.f32_at(108) as usize;
    let scl_slope = h.f32_at(112);
    let scl_inter = h.f32_at(116);
    let spacing = [h.f32_at(88), h.f32_at(84), h.f32_at(80)]; // (dz, dy, dx)

    let n = nx * ny * nz;
    let data = &bytes
        .get(vox_offset..)
        .ok_or_else(|| Error::Format(format!("{}: vox_offset beyond file", path.display())))?;

    let rd = |i: usize, width: usize| -> Result<&[u8]> {
        data.get(i * width..(i + 1) * width).ok_or_else(|| {
            Error::Format(format!("{}: voxel data truncated", path.display()))
        })
    };
    let fix16 = |b: [u8; 2]| if swap { [b[1], b[0]] } else { b };
    let fix32 = |b: [u8; 4]| if swap { [b[3], b[2], b[1], b[0]] } else { b };
    let fix64 = |b: [u8; 8]| {
        if swap {
            [b[7], b[6], b[5], b[4], b[3], b[2], b[1], b[0]]
        } else {
            b
        }
    };

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = match datatype {
            2 => rd(i, 1)?[0] as f32,                                     // uint8
            4 => i16::from_le_bytes(fix16(rd(i, 2)?.try_into().unwrap())) as f32, // int16
            8 => i32::from_le_bytes(fix32(rd(i, 4)?.try_into().unwrap())) as f32, // int32
            16 => f32::from_le_bytes(fix32(rd(i, 4)?.try_into().unwrap())),       // float32
            64 => f64::from_le_bytes(fix64(rd(i, 8)?.try_into().unwrap())) as f32, // float64
            256 => rd(i, 1)?[0] as i8 as f32,                             // int8
            512 => u16::from_le_bytes(fix16(rd(i, 2)?.try_into().unwrap())) as f32, // uint16
            other => {
                return Err(Error::Format(format!(
                    "{}: unsupported NIfTI datatype {other}",
                    path.display()
                )))
            }
        };
        out.push(v);
    }
    if scl_slope != 0.0 && !(scl_slope == 1.0 && scl_inter == 0.0) {
        for v in &mut out {
            *v = *v * scl_slope + scl_inter;
        }
    }
    // NIfTI stores x fastest; (nz, ny, nx) keeps that ordering.
    let data = Array3::from_shape_vec((nz, ny, nx), out)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(NiftiVolume { data, spacing })
}

/// Finds the `.nii` file for a modality inside a case directory.
fn find_nifti(dir: &Path, tag: &str, exclude: &[&str]) -> Result<PathBuf> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut hits: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_lowercase();
        if !name.ends_with(".nii") {
            continue;
        }
        if name.contains(tag) && !exclude.iter().any(|x| name.contains(x)) {
            hits.push(entry.path());
        }
    }
    hits.sort();
    match hits.len() {
        0 => Err(Error::Io(format!(
            "missing modality {tag} (no *{tag}*.nii in {})",
            dir.display()
        ))),
        1 => Ok(hits.remove(0)),
        _ => Err(Error::Format(format!(
            "ambiguous modality {tag} in {}: {hits:?}",
            dir.display()
        ))),
    }
}

/// Loads a multi-modal case directory of NIfTI files:
/// `*flair.nii, *t1.nii, *t1ce.nii, *t2.nii` and optional `*seg.nii`.
pub fn load_case_nifti(dir: &Path) -> Result<Case> {
    let flair = read_nifti(&find_nifti(dir, "flair", &[])?)?;
    let t1 = read_nifti(&find_nifti(dir, "t1", &["t1ce", "t1gd"])?)?;
    let t1ce = read_nifti(&find_nifti(dir, "t1ce", &[]).or_else(|_| find_nifti(dir, "t1gd", &[]))?)?;
    let t2 = read_nifti(&find_nifti(dir, "t2", &[])?)?;

    let dim = flair.data.dim();
    let mut modalities = ndarray::Array4::<f32>::zeros((4, dim.0, dim.1, dim.2));
    for (i, vol) in [&flair, &t1, &t1ce, &t2].iter().enumerate() {
        if vol.data.dim() != dim {
            return Err(Error::Shape(format!(
                "modality {i} shape {:?} != {:?}",
                vol.data.dim(),
                dim
            )));
        }
        modalities.index_axis_mut(ndarray::Axis(0), i).assign(&vol.data);
    }
    let labels = match find_nifti(dir, "seg", &[]) {
        Ok(path) => {
            let vol = read_nifti(&path)?;
            let as_u8 = vol.data.mapv(|v| v.round() as u8);
            Some(LabelMap::new(as_u8)?)
        }
        Err(_) => None,
    };
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    Case::new(id, modalities, labels, flair.spacing)
}
