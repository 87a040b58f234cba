//! Artifact serialization. Data files hold no timestamps, so a rerun with the
//! same configuration and seed reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub fn csv_artifact<T: Serialize>(name: &str, rows: &[T]) -> Result<Artifact> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(Artifact {
        name: name.to_string(),
        bytes,
    })
}

pub fn json_artifact<T: Serialize + ?Sized>(name: &str, value: &T) -> Result<Artifact> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(Artifact {
        name: name.to_string(),
        bytes,
    })
}

/// Writes each artifact into `dir` with a `<name>.meta.json` sidecar holding
/// `meta` (the resolved configuration and seed).
pub fn write_artifacts(
    dir: &Path,
    artifacts: &[Artifact],
    meta: &serde_json::Value,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut meta_bytes = serde_json::to_vec_pretty(meta)?;
    meta_bytes.push(b'\n');
    let mut written = Vec::with_capacity(2 * artifacts.len());
    for a in artifacts {
        let path = dir.join(&a.name);
        fs::write(&path, &a.bytes)?;
        let side = dir.join(format!("{}.meta.json", a.name));
        fs::write(&side, &meta_bytes)?;
        written.push(path);
        written.push(side);
    }
    Ok(written)
}
