//! Run manifests: the resolved arguments of every command, written next
//! to its outputs. Replaying the recorded argv reproduces the outputs
//! bit for bit (all randomness is seeded, no timestamps are recorded).

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a T,
    /// Argv that replays this run.
    argv: Vec<String>,
}

/// Writes `manifest.json` into `out_dir`.
pub fn write<T: Serialize>(
    out_dir: &Path,
    command: &str,
    args: &T,
    argv: Vec<String>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = Manifest {
        tool: "voxseg",
        version: env!("CARGO_PKG_VERSION"),
        command,
        args,
        argv,
    };
    let body = serde_json::to_string_pretty(&manifest)?;
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
