//! Content-addressed stage records and the output-directory lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files under `dir`, recursively, as paths relative to `root`, sorted.
pub fn list_files(root: &Path, dir: &Path) -> io::Result<Vec<String>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(relative(root, &p));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// What a finished stage produced, keyed by the hash of what it consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn digest(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("record serializes"))
    }

    pub fn load(path: &Path) -> Option<StageRecord> {
        serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
    }

    /// `true` when every recorded output still has its recorded content.
    pub fn intact(&self, root: &Path) -> bool {
        self.outputs.iter().all(|(rel, h)| sha256_file(&root.join(rel)).is_ok_and(|x| &x == h))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Cache key from the stage name, its parameters and its upstream records.
pub fn stage_key<P: Serialize>(stage: &str, params: &P, upstream: &[&StageRecord]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(serde_json::to_vec(params)?);
    for u in upstream {
        h.update(u.digest().as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Hashes every file a stage wrote under `dirs` (and `extra` files).
pub fn collect_outputs(root: &Path, dirs: &[PathBuf], extra: &[PathBuf], exclude: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let skip = relative(root, exclude);
    for d in dirs {
        for rel in list_files(root, d)? {
            if rel != skip {
                let h = sha256_file(&root.join(&rel))?;
                out.insert(rel, h);
            }
        }
    }
    for f in extra {
        out.insert(relative(root, f), sha256_file(f)?);
    }
    Ok(out)
}

/// Exclusive ownership of an output directory for the life of the value.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".nowcast.lock";

    pub fn acquire(out: &Path) -> Result<OutputLock> {
        fs::create_dir_all(out)?;
        let path = out.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, format!("{}\n", std::process::id()))?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::validation(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
