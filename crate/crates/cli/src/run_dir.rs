//! Run directories: every output of a command lands under one directory
//! together with the effective config and an append-only manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use satloc::config::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
}

/// One command invocation as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub outputs: Vec<OutputEntry>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    outputs: Vec<OutputEntry>,
    started: Instant,
}

impl RunDir {
    /// Nothing touches the disk until the first write.
    pub fn new(root: impl Into<PathBuf>, command: &str) -> Self {
        RunDir {
            root: root.into(),
            command: command.to_string(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root)
            .with_context(|| format!("creating run directory {}", self.root.display()))
    }

    /// Create parent directories of `rel` and return its full path.
    pub fn prepare(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    /// Record a file written by someone else. A directory is recorded as one
    /// entry holding the total size of the files directly inside it.
    pub fn record(&mut self, rel: impl AsRef<Path>) -> Result<()> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        let meta = fs::metadata(&path).with_context(|| format!("stat {}", path.display()))?;
        let bytes = if meta.is_dir() {
            let mut total = 0;
            for entry in fs::read_dir(&path)? {
                let m = entry?.metadata()?;
                if m.is_file() {
                    total += m.len();
                }
            }
            total
        } else {
            meta.len()
        };
        let key = rel.to_string_lossy().replace('\\', "/");
        self.outputs.retain(|o| o.path != key);
        self.outputs.push(OutputEntry { path: key, bytes });
        Ok(())
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.prepare(&rel)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        rel: impl AsRef<Path>,
        value: &T,
    ) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(rel, text + "\n")
    }

    /// Echo the effective config and append this invocation to the manifest.
    pub fn finish(mut self, config: &RunConfig, argv: &[String]) -> Result<()> {
        self.create()?;
        self.write(CONFIG_FILE, config.to_toml())?;
        let manifest_path = self.root.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            // A damaged manifest is replaced rather than failing the run.
            Manifest::load(&self.root).unwrap_or_default()
        } else {
            Manifest::default()
        };
        manifest.commands.push(ManifestEntry {
            tool: "satloc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            outputs: self.outputs.clone(),
            elapsed_s: self.started.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&manifest_path, text)
            .with_context(|| format!("writing {}", manifest_path.display()))
    }
}
