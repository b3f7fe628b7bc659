//! Staged artifact trees: everything is written into a hidden sibling
//! directory and moved into place only once the whole run succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use worldforge::latent::write_pnm;

use crate::{CliError, Result};

pub const INDEX: &str = "artifacts.sha256";

pub struct Staging {
    dir: TempDir,
    files: BTreeMap<String, String>,
}

impl Staging {
    /// Creates the staging directory next to `output`.
    pub fn new(output: &Path) -> Result<Self> {
        let parent = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let dir = tempfile::Builder::new().prefix(".worldforge-staging-").tempdir_in(parent)?;
        Ok(Self { dir, files: BTreeMap::new() })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        if rel == INDEX || self.files.contains_key(rel) {
            return Err(CliError::Validation(format!("artifact {rel} written twice")));
        }
        let path = self.dir.path().join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// One frame as an 8-bit pixmap.
    pub fn write_frame(&mut self, rel: &str, data: &[f64], height: usize, width: usize, channels: usize) -> Result<()> {
        let mut buf = Vec::new();
        write_pnm(&mut buf, data, height, width, channels).map_err(|e| CliError::stage("write", e))?;
        self.write(rel, &buf)
    }

    pub fn write_mask(&mut self, rel: &str, mask: &[bool], height: usize, width: usize) -> Result<()> {
        let v: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        self.write_frame(rel, &v, height, width, 1)
    }

    pub fn with_writer(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    /// Writes the hash index and moves the tree to `output`, replacing a
    /// previous run there. Refuses to replace a directory that is not an
    /// earlier artifact tree.
    pub fn commit(self, output: &Path) -> Result<PathBuf> {
        let mut index = String::new();
        for (rel, h) in &self.files {
            index.push_str(&format!("{h}  {rel}\n"));
        }
        fs::File::create(self.dir.path().join(INDEX))?.write_all(index.as_bytes())?;
        let old = if output.exists() {
            let empty = output.is_dir() && fs::read_dir(output)?.next().is_none();
            if !empty && !output.join(INDEX).is_file() {
                return Err(CliError::Validation(format!(
                    "{} exists and is not an artifact directory",
                    output.display()
                )));
            }
            let parked = self.dir.path().with_extension("old");
            fs::rename(output, &parked)?;
            Some(parked)
        } else {
            None
        };
        let staged = self.dir.keep();
        if let Err(e) = fs::rename(&staged, output) {
            if let Some(p) = &old {
                let _ = fs::rename(p, output);
            }
            let _ = fs::remove_dir_all(&staged);
            return Err(e.into());
        }
        if let Some(p) = old {
            fs::remove_dir_all(p)?;
        }
        Ok(output.to_path_buf())
    }
}

/// Parses an index into `(relative path, hex digest)` pairs.
pub fn read_index(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(dir.join(INDEX))
        .map_err(|e| CliError::Validation(format!("{} has no readable {INDEX}: {e}", dir.display())))?;
    text.lines()
        .map(|l| {
            let (h, rel) = l
                .split_once("  ")
                .ok_or_else(|| CliError::Validation(format!("malformed index line {l:?}")))?;
            Ok((rel.to_string(), h.to_string()))
        })
        .collect()
}

/// Files whose contents no longer match the index.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (rel, h) in read_index(dir)? {
        match fs::read(dir.join(&rel)) {
            Ok(bytes) if hex::encode(Sha256::digest(&bytes)) == h => {}
            _ => bad.push(rel),
        }
    }
    Ok(bad)
}
