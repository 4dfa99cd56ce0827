//! Per-command run manifests.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file, or of every file directly inside a directory taken in name order.
pub fn digest_path(path: &Path) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::io(path, e);
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        names.retain(|p| p.is_file());
        names.sort();
        let mut hasher = Sha256::new();
        for p in names {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            hasher.update(format!("{name}\0{}\n", sha256_hex(&bytes)));
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    } else {
        Ok(sha256_hex(&fs::read(path).map_err(io)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub today: Option<NaiveDate>,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    /// Hash of command, config, seed, day and input bytes; paths do not enter it.
    pub run_hash: String,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    command: &'a str,
    seed: Option<u64>,
    today: Option<NaiveDate>,
    config: &'a RunConfig,
    inputs: Vec<(&'a str, &'a str)>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        seed: Option<u64>,
        today: Option<NaiveDate>,
        inputs: Vec<InputDigest>,
        outputs: Vec<String>,
    ) -> Self {
        let part = HashedPart {
            command,
            seed,
            today,
            config,
            inputs: inputs.iter().map(|i| (i.role.as_str(), i.sha256.as_str())).collect(),
        };
        let run_hash = sha256_hex(&serde_json::to_vec(&part).expect("in-memory JSON"));
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            today,
            config: config.clone(),
            inputs,
            outputs,
            run_hash,
        }
    }

    pub fn write(&self, output_dir: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_vec_pretty(self).map_err(epicast::Error::from)?;
        json.push(b'\n');
        crate::write_file(&output_dir.join(format!("{}.manifest.json", self.command)), &json)
    }
}
