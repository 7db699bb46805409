//! Provenance records written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub command: String,
    pub config_hash: String,
    pub input_hash: String,
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<OutputFile>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(hash_bytes(&std::fs::read(path)?))
}

/// Collects outputs while a command runs and writes the record at the end.
pub struct Recorder {
    command: String,
    config_hash: String,
    inputs: Sha256,
    started: f64,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        Self {
            command: command.into(),
            config_hash: hash_bytes(&json),
            inputs: Sha256::new(),
            started: now(),
            outputs: Vec::new(),
        }
    }

    /// Folds an input file's bytes into the input hash.
    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.update(path.to_string_lossy().as_bytes());
        self.inputs.update(std::fs::read(path)?);
        Ok(())
    }

    /// Folds a literal argument (an id, a latent vector) into the input hash.
    pub fn input_value(&mut self, value: &str) {
        self.inputs.update(value.as_bytes());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Hashes the outputs and writes the record to `record_path`.
    pub fn finish(self, record_path: &Path) -> std::io::Result<RunRecord> {
        let input_hash = hex::encode(self.inputs.finalize());
        let id = hash_bytes(format!("{}|{}|{}", self.command, self.config_hash, input_hash).as_bytes())[..16].to_string();
        let outputs = self
            .outputs
            .iter()
            .map(|p| Ok(OutputFile { path: p.clone(), sha256: hash_file(p)? }))
            .collect::<std::io::Result<Vec<_>>>()?;
        let record = RunRecord {
            id,
            command: self.command,
            config_hash: self.config_hash,
            input_hash,
            started: self.started,
            finished: now(),
            outputs,
        };
        std::fs::write(record_path, serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }
}
