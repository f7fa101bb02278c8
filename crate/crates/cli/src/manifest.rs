use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use stackmac::config::digest_bytes;
use stackmac::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "stackmac.manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Provenance of one output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub config: serde_json::Value,
    pub workers: usize,
    pub deterministic: bool,
    pub outputs: Vec<OutputEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub status: String,
    pub started_unix_s: f64,
    pub wall_s: f64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// An output directory being filled by one run. Every file written through
/// it is listed, with its digest, in the manifest written by `finish`.
pub struct RunDir {
    pub dir: PathBuf,
    files: Vec<String>,
    pub notes: Vec<String>,
    started: SystemTime,
    clock: Instant,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            notes: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        })
    }

    fn register(&mut self, rel: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            let _ = fs::create_dir_all(parent);
        }
        p
    }

    pub fn path(&mut self, rel: &str) -> PathBuf {
        self.register(rel)
    }

    pub fn writer(&mut self, rel: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.register(rel))?))
    }

    pub fn write_json<S: Serialize + ?Sized>(&mut self, rel: &str, value: &S) -> Result<()> {
        let mut w = self.writer(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        fs::write(self.register(rel), text)?;
        Ok(())
    }

    /// Writes `manifest.json`, replacing any earlier one in this directory.
    pub fn finish(self, mut manifest: RunManifest, status: &str) -> Result<RunManifest> {
        let mut outputs = Vec::new();
        for rel in &self.files {
            let p = self.dir.join(rel);
            if let Ok(bytes) = fs::read(&p) {
                outputs.push(OutputEntry {
                    path: rel.clone(),
                    sha256: digest_bytes(&bytes),
                });
            }
        }
        manifest.outputs = outputs;
        manifest.notes = self.notes;
        manifest.status = status.to_string();
        manifest.started_unix_s = self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        manifest.wall_s = self.clock.elapsed().as_secs_f64();
        let mut w = BufWriter::new(File::create(self.dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }
}
