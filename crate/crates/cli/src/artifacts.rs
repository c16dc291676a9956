//! On-disk layout of a pipeline run and per-command manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hbiuq::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn design(&self) -> PathBuf {
        self.root.join("design.csv")
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("suite.json")
    }

    pub fn observations(&self, id: &str) -> PathBuf {
        self.root.join("cases").join(format!("{id}.csv"))
    }

    pub fn boundary_conditions(&self, id: &str) -> PathBuf {
        self.root.join("cases").join(format!("{id}_bc.csv"))
    }

    pub fn training(&self, id: &str) -> PathBuf {
        self.root.join("training").join(format!("{id}.csv"))
    }

    pub fn training_validation(&self, id: &str) -> PathBuf {
        self.root.join("training").join(format!("{id}_validation.csv"))
    }

    pub fn surrogate(&self, id: &str) -> PathBuf {
        self.root.join("surrogates").join(format!("{id}.json"))
    }

    pub fn surrogate_validation(&self) -> PathBuf {
        self.root.join("surrogates").join("validation.csv")
    }

    pub fn covariance(&self, id: &str) -> PathBuf {
        self.root.join("covariance").join(format!("{id}.csv"))
    }

    pub fn covariance_sidecar(&self, id: &str) -> PathBuf {
        self.root.join("covariance").join(format!("{id}.json"))
    }

    pub fn calibration_dir(&self) -> PathBuf {
        self.root.join("calibration")
    }

    /// `chains.csv` for joint models, `chains-<case>.csv` per single-case run.
    pub fn chains(&self, label: Option<&str>) -> PathBuf {
        let name = match label {
            Some(l) => format!("chains-{l}.csv"),
            None => "chains.csv".to_string(),
        };
        self.calibration_dir().join(name)
    }

    pub fn calibration_summary(&self) -> PathBuf {
        self.calibration_dir().join("summary.json")
    }

    pub fn hyper_summary(&self) -> PathBuf {
        self.calibration_dir().join("hyper.json")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.calibration_dir().join("diagnostics.json")
    }

    pub fn diagnostics_csv(&self) -> PathBuf {
        self.calibration_dir().join("diagnostics.csv")
    }

    pub fn validation_json(&self) -> PathBuf {
        self.root.join("validation").join("report.json")
    }

    pub fn validation_csv(&self) -> PathBuf {
        self.root.join("validation").join("report.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    /// All chain files in the calibration directory, sorted by name.
    pub fn chain_files(&self) -> Vec<PathBuf> {
        let Ok(entries) = fs::read_dir(self.calibration_dir()) else {
            return Vec::new();
        };
        let mut v: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("chains") && n.ends_with(".csv"))
            })
            .collect();
        v.sort();
        v
    }

    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproducibility record written by every command. Holds no timestamps so
/// that reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash over the config hash and every input file hash.
    pub inputs_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

/// Tracks files read and written by one command.
#[derive(Debug)]
pub struct Recorder {
    pub layout: Layout,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    warnings: Vec<String>,
}

impl Recorder {
    pub fn new(layout: &Layout, command: &str) -> Self {
        Self {
            layout: layout.clone(),
            command: command.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Reads an input artifact, recording its hash. A missing file is a
    /// validation error naming the command that produces it.
    pub fn read(&mut self, path: &Path, produced_by: &str) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Validation(format!(
                "missing input {} ({e}); run `{produced_by}` first",
                path.display()
            ))
        })?;
        self.inputs.insert(self.layout.relative(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path, produced_by: &str) -> Result<T> {
        let bytes = self.read(path, produced_by)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        self.outputs.insert(self.layout.relative(path), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(path, &bytes)
    }

    /// Writes whatever `f` produces into `path`.
    pub fn write_with(&mut self, path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(path, &buf)
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn finish(mut self, config_hash: &str, seed: u64) -> Result<Manifest> {
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        for (k, v) in &self.inputs {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        let inputs_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let manifest = Manifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: config_hash.to_string(),
            inputs_hash,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            warnings: std::mem::take(&mut self.warnings),
        };
        let path = self.layout.manifest(&self.command);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn manifest_records_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let mut r = Recorder::new(&layout, "doe");
        r.write(&layout.design(), b"P1\n1\n").unwrap();
        assert!(r.read(&layout.suite(), "simulate").is_err());
        let m = r.finish("abc", 3).unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["design.csv"]);
        assert!(layout.manifest("doe").exists());
    }
}
