//! Output files and the run manifest.
//!
//! Every file is written to a temporary sibling and renamed into place, and
//! recorded with its SHA-256 for the manifest inventory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = concat!("mfgc-lab/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Output directory that remembers what it wrote.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        let entry = FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        };
        match self.files.iter_mut().find(|f| f.path == name) {
            Some(f) => *f = entry,
            None => self.files.push(entry),
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; struct fields keep declaration
    /// order and maps are sorted.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// RFC 4180 CSV with a header row.
    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(name, &bytes)
    }
}

/// One check outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl Verdict {
    pub fn new(check: impl Into<String>, pass: bool, value: Option<f64>, tolerance: Option<f64>, detail: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            pass,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    /// `value <= tolerance`.
    pub fn at_most(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(check, value <= tolerance, Some(value), Some(tolerance), "")
    }

    /// `value >= -tolerance`.
    pub fn nonnegative(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(check, value >= -tolerance, Some(value), Some(tolerance), "")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Error => 2,
        }
    }
}

/// Run record written next to the outputs, also on failure. Holds the
/// wall-clock timing, so it is not itself reproducible byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub status: Status,
    pub exit_code: i32,
    pub error: Option<String>,
    pub verdicts: Vec<Verdict>,
    /// Per-stage timings (suite criteria), seconds.
    pub timings: Vec<Timing>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
    pub budget_seconds: Option<f64>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_are_inventoried_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path()).unwrap();
        out.write_bytes("a.txt", b"abc").unwrap();
        out.write_bytes("a.txt", b"abc").unwrap();
        assert_eq!(out.files().len(), 1);
        assert_eq!(
            out.files()[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"abc");
        assert!(!dir.path().join(".a.txt.tmp").exists());
    }

    #[test]
    fn csv_rows_quote_per_rfc4180() {
        #[derive(Serialize)]
        struct Row {
            name: String,
            x: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path()).unwrap();
        out.write_csv("r.csv", &[Row { name: "a,b".into(), x: 0.5 }]).unwrap();
        let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text, "name,x\n\"a,b\",0.5\n");
    }
}
