//! Run manifests: an ordered record of stages with their flags, seeds, and
//! SHA-256 digests of every file read or written.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    pub seed: Option<u64>,
    pub flags: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Expresses `path` relative to `base` when it lies underneath it.
fn relative(path: &Path, base: Option<&Path>) -> String {
    base.and_then(|b| path.strip_prefix(b).ok())
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

impl StageRecord {
    /// Builds a record from serialized flags; string flags naming paths
    /// under `base` are rewritten relative to it.
    pub fn new(
        command: &str,
        seed: Option<u64>,
        flags: serde_json::Value,
        base: Option<&Path>,
    ) -> Self {
        let mut map = BTreeMap::new();
        if let serde_json::Value::Object(obj) = flags {
            for (k, v) in obj {
                let v = match v {
                    serde_json::Value::String(s) => {
                        serde_json::Value::String(relative(Path::new(&s), base))
                    }
                    other => other,
                };
                map.insert(k, v);
            }
        }
        StageRecord {
            command: command.to_owned(),
            seed,
            flags: map,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path, base: Option<&Path>) -> Result<()> {
        self.inputs.insert(relative(path, base), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path, base: Option<&Path>) -> Result<()> {
        self.outputs
            .insert(relative(path, base), sha256_file(path)?);
        Ok(())
    }

    /// Digests every regular file directly inside `dir`, in name order.
    pub fn output_dir(&mut self, dir: &Path, base: Option<&Path>) -> Result<()> {
        for path in sorted_files(dir)? {
            self.output(&path, base)?;
        }
        Ok(())
    }

    pub fn input_dir(&mut self, dir: &Path, base: Option<&Path>) -> Result<()> {
        for path in sorted_files(dir)? {
            self.input(&path, base)?;
        }
        Ok(())
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

impl RunManifest {
    pub fn new() -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            stages: Vec::new(),
        }
    }

    pub fn load_or_new(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn paths_under_base_become_relative() {
        let base = Path::new("/runs/a");
        let flags = serde_json::json!({"out": "/runs/a/factors", "other": "/tmp/x", "k": 3});
        let r = StageRecord::new("factorize", Some(1), flags, Some(base));
        assert_eq!(r.flags["out"], "factors");
        assert_eq!(r.flags["other"], "/tmp/x");
        assert_eq!(r.flags["k"], 3);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut m = RunManifest::load_or_new(&p).unwrap();
        m.stages.push(StageRecord::new(
            "synth",
            Some(4),
            serde_json::json!({}),
            None,
        ));
        m.write(&p).unwrap();
        assert_eq!(RunManifest::load_or_new(&p).unwrap(), m);
    }
}
