use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ddad_core::{DdadError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::options::ResolvedConfig;

/// Suffix of manifest files; each subcommand writes `<command>.manifest.json`.
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Record of one run: everything needed to redo it plus digests of what
/// it wrote. Deliberately free of timestamps and host details so that a
/// rerun produces the same bytes.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: &'a ResolvedConfig,
    pub seeds: BTreeMap<String, Vec<u64>>,
    /// sha256 of every input file read directly (checkpoints, score tables)
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file the run wrote, keyed by path relative to the output directory
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digests of the listed files under `dir`; directories are walked.
pub fn digest_paths(dir: &Path, paths: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for rel in paths {
        for entry in WalkDir::new(dir.join(rel)).sort_by_file_name() {
            let entry = entry.map_err(|e| DdadError::Io(e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let key = entry.path().strip_prefix(dir).expect("walk stays under its root");
            out.insert(key.to_string_lossy().replace('\\', "/"), sha256_file(entry.path())?);
        }
    }
    Ok(out)
}

impl Manifest<'_> {
    /// Hashes the artifacts this run wrote (paths relative to `out_dir`)
    /// and writes the manifest next to them.
    pub fn write(mut self, out_dir: &Path, artifacts: &[&str]) -> Result<()> {
        self.artifacts = digest_paths(out_dir, artifacts)?;
        let json = serde_json::to_string_pretty(&self).map_err(|e| DdadError::Config(e.to_string()))?;
        fs::write(out_dir.join(format!("{}{MANIFEST_SUFFIX}", self.command)), json + "\n")?;
        Ok(())
    }
}
