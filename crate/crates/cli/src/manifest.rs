//! Per-stage manifests: resolved config, seeds and content hashes of every
//! input and output. No timestamps, so reruns reproduce them byte for byte.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest(path: &Path) -> demandcast::Result<FileDigest> {
    let data = std::fs::read(path).map_err(|e| demandcast::Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: hex::encode(Sha256::digest(&data)),
    })
}

#[derive(Debug, Serialize)]
struct Seeds {
    catalog: u64,
    model: u64,
    train: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    stage: &'a str,
    seeds: Seeds,
    config: &'a RunConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    details: serde_json::Value,
}

pub fn manifest_path(out_dir: &Path, stage: &str) -> std::path::PathBuf {
    out_dir.join(format!("{stage}.manifest.json"))
}

/// Writes `<out_dir>/<stage>.manifest.json`.
pub fn write(
    cfg: &RunConfig,
    stage: &str,
    inputs: &[&Path],
    outputs: &[&Path],
    details: serde_json::Value,
) -> demandcast::Result<()> {
    let m = Manifest {
        tool: "demandctl",
        version: env!("CARGO_PKG_VERSION"),
        stage,
        seeds: Seeds {
            catalog: cfg.catalog.seed,
            model: cfg.model.seed,
            train: cfg.train.seed,
        },
        config: cfg,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        outputs: outputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
        details,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
    demandcast::io::write_text(&manifest_path(&cfg.out_dir, stage), &text)
}

/// Reads the `details` object of an earlier stage's manifest.
pub fn details(out_dir: &Path, stage: &str) -> Option<serde_json::Value> {
    let text = std::fs::read_to_string(manifest_path(out_dir, stage)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("details").cloned()
}
