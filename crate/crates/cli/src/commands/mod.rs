pub mod calibrate;
pub mod evaluate;
pub mod phantom;
pub mod predict;
pub mod train;
pub mod uncertainty;

use std::path::{Path, PathBuf};

use anyhow::Context;
use voxseg_core::preprocess::normalize_case;
use voxseg_core::volume::io::{load_case, CaseFormat};
use voxseg_core::Case;

/// Case directories directly under `data`, sorted by name.
pub fn discover_case_dirs(data: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        anyhow::bail!("no case directories under {}", data.display());
    }
    Ok(dirs)
}

fn detect_format(dir: &Path) -> CaseFormat {
    if dir.join("meta.json").exists() {
        CaseFormat::RawJson
    } else {
        CaseFormat::Nifti
    }
}

/// Loads every case under `data`, optionally normalizing intensities.
pub fn load_cases(data: &Path, normalize: bool) -> anyhow::Result<Vec<Case>> {
    let mut cases = Vec::new();
    for dir in discover_case_dirs(data)? {
        let case = load_case(&dir, detect_format(&dir))
            .with_context(|| format!("loading case {}", dir.display()))?;
        let case = if normalize {
            normalize_case(case).with_context(|| format!("normalizing {}", dir.display()))?
        } else {
            case
        };
        cases.push(case);
    }
    Ok(cases)
}

/// Comma-separated list parser for numeric flags.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list entry {p:?}: {e}"))
        })
        .collect()
}
