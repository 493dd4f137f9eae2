use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use ldpp::corpus::write_atomic;
use ldpp::rng::content_hash;
use serde::Serialize;

pub const LAYOUT: [&str; 6] = ["corpus", "tuples", "checkpoints", "logs", "eval", "analysis"];

/// An output directory owned by this process until dropped.
pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
    _file: File,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in LAYOUT {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let lock = root.join(".lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::anyhow!("{} is locked by another run (remove {} if it is stale)", root.display(), lock.display())
            } else {
                anyhow::Error::new(e).context(format!("creating {}", lock.display()))
            }
        })?;
        Ok(Self { root: root.to_path_buf(), lock, _file: file })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Hash of a file, or of every file below a directory in path order.
pub fn artifact_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(content_hash(&fs::read(path).with_context(|| format!("reading {}", path.display()))?));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut joined = Vec::new();
    for f in files {
        joined.extend_from_slice(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        joined.extend_from_slice(content_hash(&fs::read(&f)?).as_bytes());
    }
    Ok(content_hash(&joined))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: None,
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            bail!("declared output {} was not produced", p.display());
        }
        self.outputs.push(Artifact { path: p.display().to_string(), sha256: artifact_hash(p)? });
        Ok(())
    }

    /// Writes the manifest atomically to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        write_atomic(path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(())
    }
}
