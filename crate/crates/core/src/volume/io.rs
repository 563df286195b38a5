//! Raw little-endian arrays with JSON sidecars.
//!
//! Case layout on disk:
//! `<id>/flair.raw, t1.raw, t1ce.raw, t2.raw, [labels.raw], meta.json`.
//! Standalone arrays (predictions, uncertainty maps) are stored as a
//! `<stem>.raw` / `<stem>.json` pair. NIfTI-1 volumes can be read through
//! [`super::nifti`] for real data.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap, Modality, Region, UncertaintyMap};

/// On-disk case formats understood by [`load_case`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFormat {
    RawJson,
    Nifti,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseMeta {
    id: String,
    shape: [usize; 3],
    dtype: String,
    spacing: [f32; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    shape: [usize; 3],
    dtype: String,
    spacing: [f32; 3],
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    region: Option<Region>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_len<T>(data: &[T], shape: [usize; 3], path: &Path) -> Result<()> {
    let n = shape[0] * shape[1] * shape[2];
    if data.len() != n {
        return Err(Error::Format(format!(
            "{}: {} voxels on disk, {} expected for shape {:?}",
            path.display(),
            data.len(),
            n,
            shape
        )));
    }
    Ok(())
}

/// Writes a case directory in the raw+json layout.
pub fn save_case(case: &Case, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = case.shape();
    for (i, m) in Modality::ALL.iter().enumerate() {
        let ch = case.modalities.index_axis(ndarray::Axis(0), i);
        let flat: Vec<f32> = ch.iter().cloned().collect();
        write_bytes(
            &dir.join(format!("{}.raw", m.file_stem())),
            &f32_to_le_bytes(&flat),
        )?;
    }
    if let Some(ref labels) = case.labels {
        let flat: Vec<u8> = labels.voxels().iter().cloned().collect();
        write_bytes(&dir.join("labels.raw"), &flat)?;
    }
    let meta = CaseMeta {
        id: case.id.clone(),
        shape: [d, h, w],
        dtype: "f32le".into(),
        spacing: case.spacing,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta encode: {e}")))?;
    write_bytes(&dir.join("meta.json"), json.as_bytes())
}

fn load_case_raw_json(dir: &Path) -> Result<Case> {
    let meta_path = dir.join("meta.json");
    let meta: CaseMeta = serde_json::from_slice(&read_bytes(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.dtype != "f32le" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype {:?}",
            meta_path.display(),
            meta.dtype
        )));
    }
    let [d, h, w] = meta.shape;
    let mut modalities = Array4::<f32>::zeros((4, d, h, w));
    for (i, m) in Modality::ALL.iter().enumerate() {
        let path = dir.join(format!("{}.raw", m.file_stem()));
        if !path.exists() {
            return Err(Error::Io(format!(
                "missing modality {} ({})",
                m.file_stem(),
                path.display()
            )));
        }
        let data = f32_from_le_bytes(&read_bytes(&path)?, &path)?;
        expect_len(&data, meta.shape, &path)?;
        let ch = Array3::from_shape_vec((d, h, w), data)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        modalities
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&ch);
    }
    let labels_path = dir.join("labels.raw");
    let labels = if labels_path.exists() {
        let data = read_bytes(&labels_path)?;
        expect_len(&data, meta.shape, &labels_path)?;
        let arr = Array3::from_shape_vec((d, h, w), data)
            .map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
        Some(LabelMap::new(arr)?)
    } else {
        None
    };
    Case::new(meta.id, modalities, labels, meta.spacing)
}

/// Loads a case directory in the declared format.
pub fn load_case(dir: &Path, format: CaseFormat) -> Result<Case> {
    match format {
        CaseFormat::RawJson => load_case_raw_json(dir),
        CaseFormat::Nifti => super::nifti::load_case_nifti(dir),
    }
}

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("json"))
}

/// Writes a label map as `<stem>.raw` + `<stem>.json`.
pub fn save_labelmap(labels: &LabelMap, stem: &Path, spacing: [f32; 3]) -> Result<()> {
    let (raw, json) = stem_paths(stem);
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let (d, h, w) = labels.shape();
    let flat: Vec<u8> = labels.voxels().iter().cloned().collect();
    write_bytes(&raw, &flat)?;
    let meta = ArrayMeta {
        shape: [d, h, w],
        dtype: "u8".into(),
        spacing,
        kind: "labels".into(),
        region: None,
    };
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta encode: {e}")))?;
    write_bytes(&json, body.as_bytes())
}

/// Reads a label map written by [`save_labelmap`].
pub fn load_labelmap(stem: &Path) -> Result<LabelMap> {
    let (raw, json) = stem_paths(stem);
    let meta: ArrayMeta = serde_json::from_slice(&read_bytes(&json)?)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    let data = read_bytes(&raw)?;
    expect_len(&data, meta.shape, &raw)?;
    let [d, h, w] = meta.shape;
    let arr = Array3::from_shape_vec((d, h, w), data)
        .map_err(|e| Error::Format(format!("{}: {e}", raw.display())))?;
    LabelMap::new(arr)
}

/// Writes an uncertainty map as `<stem>.raw` + `<stem>.json`.
///
/// By convention the stem is `<case_id>_unc_<region>`.
pub fn save_uncertainty(map: &UncertaintyMap, stem: &Path, spacing: [f32; 3]) -> Result<()> {
    let (raw, json) = stem_paths(stem);
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let dim = map.values().dim();
    let flat: Vec<u8> = map.values().iter().cloned().collect();
    write_bytes(&raw, &flat)?;
    let meta = ArrayMeta {
        shape: [dim.0, dim.1, dim.2],
        dtype: "u8".into(),
        spacing,
        kind: "uncertainty".into(),
        region: Some(map.region()),
    };
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta encode: {e}")))?;
    write_bytes(&json, body.as_bytes())
}

/// Reads an uncertainty map written by [`save_uncertainty`].
pub fn load_uncertainty(stem: &Path) -> Result<UncertaintyMap> {
    let (raw, json) = stem_paths(stem);
    let meta: ArrayMeta = serde_json::from_slice(&read_bytes(&json)?)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    let region = meta.region.ok_or_else(|| {
        Error::Format(format!("{}: missing region field", json.display()))
    })?;
    let data = read_bytes(&raw)?;
    expect_len(&data, meta.shape, &raw)?;
    let [d, h, w] = meta.shape;
    let arr = Array3::from_shape_vec((d, h, w), data)
        .map_err(|e| Error::Format(format!("{}: {e}", raw.display())))?;
    UncertaintyMap::new(arr, region)
}

/// Conventional stem for an uncertainty file.
pub fn uncertainty_stem(dir: &Path, case_id: &str, region: Region) -> PathBuf {
    dir.join(format!("{}_unc_{}", case_id, region.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::phantom::{make_phantom, PhantomSpec};
    use ndarray::Array3;

    fn tiny_phantom(seed: u64) -> Case {
        make_phantom(&PhantomSpec {
            shape: [16, 16, 16],
            n_tumors: 1,
            radii: [2.5, 1.5, 1.0],
            seed,
            ..PhantomSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn case_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let case = tiny_phantom(5);
        let path = dir.path().join(&case.id);
        save_case(&case, &path).unwrap();
        let loaded = load_case(&path, CaseFormat::RawJson).unwrap();
        assert_eq!(loaded.id, case.id);
        assert_eq!(loaded.modalities, case.modalities);
        assert_eq!(loaded.spacing, case.spacing);
        assert_eq!(
            loaded.labels.unwrap().voxels(),
            case.labels.unwrap().voxels()
        );
    }

    #[test]
    fn missing_modality_is_io_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let case = tiny_phantom(6);
        let path = dir.path().join(&case.id);
        save_case(&case, &path).unwrap();
        std::fs::remove_file(path.join("t2.raw")).unwrap();
        match load_case(&path, CaseFormat::RawJson) {
            Err(Error::Io(msg)) => assert!(msg.contains("t2"), "message {msg:?} names t2"),
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_label_value_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let case = tiny_phantom(7);
        let path = dir.path().join(&case.id);
        save_case(&case, &path).unwrap();
        // Corrupt one label byte to the illegal value 3.
        let labels_path = path.join("labels.raw");
        let mut bytes = std::fs::read(&labels_path).unwrap();
        bytes[0] = 3;
        std::fs::write(&labels_path, bytes).unwrap();
        assert!(matches!(
            load_case(&path, CaseFormat::RawJson),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn labelmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let case = tiny_phantom(8);
        let labels = case.labels.unwrap();
        let stem = dir.path().join("pred");
        save_labelmap(&labels, &stem, [1.0; 3]).unwrap();
        assert_eq!(load_labelmap(&stem).unwrap().voxels(), labels.voxels());
    }

    #[test]
    fn uncertainty_round_trip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = UncertaintyMap::new(Array3::zeros((4, 4, 4)), Region::Wt).unwrap();
        let stem = uncertainty_stem(dir.path(), "c0", Region::Wt);
        save_uncertainty(&zeros, &stem, [1.0; 3]).unwrap();
        let loaded = load_uncertainty(&stem).unwrap();
        // All-zero map round-trips to all zeros: the most certain map.
        assert!(loaded.values().iter().all(|&v| v == 0));
        assert_eq!(loaded.region(), Region::Wt);

        let bad = Array3::from_elem((2, 2, 2), 101u8);
        assert!(matches!(
            UncertaintyMap::new(bad, Region::Tc),
            Err(Error::Range(_))
        ));
    }
}
