use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path.display(), e))?;
        let mut reader = BufReader::new(file);
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = reader.read(&mut buf).map_err(|e| CliError::io(path.display(), e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(InputDigest { path: path.to_path_buf(), sha256: hex::encode(hasher.finalize()) })
    }
}

/// Provenance written next to every `explain` run.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub engine: &'static str,
    pub engine_version: &'static str,
    pub command: &'static str,
    pub config: C,
    pub threads: usize,
    pub inputs: Vec<InputDigest>,
    pub records: usize,
    pub wall_time_ms: u64,
}

impl<C: Serialize> RunManifest<C> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
