//! Run directories: data files, report and manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to replay a run. Timestamps and thread count are the
/// only entries that may differ between replays.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub engine: String,
    pub engine_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub files: Vec<FileEntry>,
}

/// Output directory of one run; every data file written through it is
/// listed with its hash in the manifest.
pub struct RunArtifact {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v}")
}

impl RunArtifact {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("plotdata"))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        self.files.retain(|e| e.path != name);
        self.files.push(FileEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    /// Writes manifest.json; it is not itself listed.
    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut m = manifest.clone();
        m.files = self.files.clone();
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_are_hashed_and_replaced() {
        let tmp = tempfile::tempdir().unwrap();
        let mut a = RunArtifact::create(tmp.path().join("run")).unwrap();
        a.write_csv("summary.csv", &["t", "v"], &[vec![num(0.0), num(0.5)]]).unwrap();
        a.write_csv("summary.csv", &["t", "v"], &[vec![num(0.0), num(0.25)]]).unwrap();
        assert_eq!(a.files().len(), 1);
        let text = fs::read_to_string(tmp.path().join("run/summary.csv")).unwrap();
        assert_eq!(text, "t,v\n0,0.25\n");
        assert_eq!(a.files()[0].sha256, sha256_hex(text.as_bytes()));
        assert!(tmp.path().join("run/plotdata").is_dir());
    }
}
