//! Run manifests and content hashing of inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "step-mi-run/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Incomplete,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// As given on the command line.
    pub path: String,
    /// Git-style object hash (SHA-256): a blob hash for files, a tree hash
    /// over sorted relative paths and blob hashes for directories.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    pub seed: Option<u64>,
    /// Canonical text of the effective configuration.
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub status: Status,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub wall_clock_secs: Option<f64>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file or directory tree.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries = Vec::new();
        for e in WalkDir::new(path).sort_by_file_name() {
            let e = e.with_context(|| format!("reading {}", path.display()))?;
            if e.file_type().is_file() {
                let rel = e.path().strip_prefix(path).expect("walk stays under root");
                let bytes = fs::read(e.path()).with_context(|| format!("reading {}", e.path().display()))?;
                entries.push(format!("{}\0{}\n", rel.to_string_lossy().replace('\\', "/"), blob_hash(&bytes)));
            }
        }
        let body = entries.concat();
        let mut h = Sha256::new();
        h.update(format!("tree {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(blob_hash(&bytes))
    }
}

pub fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| Ok(InputDigest { path: p.to_string_lossy().into_owned(), sha256: content_hash(p)? }))
        .collect()
}

/// Owns the manifest of one output directory for the lifetime of a command.
pub struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
    start: std::time::Instant,
}

impl Recorder {
    /// Creates `dir` and writes an incomplete manifest before anything else.
    pub fn begin(dir: &Path, command: &str, argv: &[String], inputs: Vec<InputDigest>) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cwd = std::env::current_dir().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        let rec = Recorder {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                format: FORMAT.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: argv.to_vec(),
                cwd,
                seed: None,
                config: None,
                config_hash: None,
                inputs,
                outputs: Vec::new(),
                status: Status::Incomplete,
                exit_code: None,
                error: None,
                started_unix_ms: now_ms(),
                finished_unix_ms: None,
                wall_clock_secs: None,
            },
            start: std::time::Instant::now(),
        };
        rec.write()?;
        Ok(rec)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn set_config(&mut self, config: &step_mi::RunConfig) -> Result<()> {
        self.manifest.seed = Some(config.seed);
        self.manifest.config = Some(config.to_text());
        self.manifest.config_hash = Some(config.hash());
        self.write()
    }

    pub fn set_inputs(&mut self, inputs: Vec<InputDigest>) -> Result<()> {
        self.manifest.inputs = inputs;
        self.write()
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        self.manifest.seed = Some(seed);
        self.write()
    }

    /// Records an output path relative to the run directory.
    pub fn output(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.manifest.outputs.contains(&rel) {
            self.manifest.outputs.push(rel);
        }
    }

    /// Writes `bytes` to `rel` and records it.
    pub fn write_output(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.output(rel);
        Ok(())
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn close(mut self, status: Status, exit_code: i32, error: Option<String>) -> Result<()> {
        self.manifest.status = status;
        self.manifest.exit_code = Some(exit_code);
        self.manifest.error = error;
        self.manifest.finished_unix_ms = Some(now_ms());
        self.manifest.wall_clock_secs = Some(self.start.elapsed().as_secs_f64());
        self.write()
    }

    pub fn complete(self) -> Result<()> {
        self.close(Status::Complete, 0, None)
    }

    pub fn fail(self, exit_code: i32, error: &anyhow::Error) -> Result<()> {
        self.close(Status::Failed, exit_code, Some(format!("{error:#}")))
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}
