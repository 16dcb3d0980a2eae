//! Atomic file output and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub library_version: &'static str,
    pub format_version: u32,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

/// Collects output files for one run and commits them together with the
/// manifest once everything has been computed.
pub struct Run {
    subcommand: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    pub fn new(subcommand: &'static str) -> Self {
        Run {
            subcommand,
            started: Instant::now(),
            inputs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((path.to_path_buf(), bytes));
    }

    /// Writes all outputs, then the manifest next to the first one.
    pub fn commit(self, config: &impl Serialize) -> Result<()> {
        let Some((primary, _)) = self.files.first() else {
            return Ok(());
        };
        let mut manifest_path = primary.clone().into_os_string();
        manifest_path.push(".manifest.json");
        let manifest_path = PathBuf::from(manifest_path);
        let inputs = self.inputs.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>()?;
        for (path, bytes) in &self.files {
            write_atomic(path, bytes)?;
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: serde_json::to_value(config)?,
            inputs,
            library_version: vvord::VERSION,
            format_version: vvord::FORMAT_VERSION,
            threads: rayon::current_num_threads(),
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.files.iter().map(|(p, _)| p.display().to_string()).collect(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        write_atomic(&manifest_path, &text)
    }
}

pub fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    Ok(text)
}

/// Renders rows as CSV with a header line.
pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// Shortest round-trip rendering of a float.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
