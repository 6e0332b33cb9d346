//! Key loading, atomic artifact writes and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use dpfp::crypto_rand::SecretKey;

use crate::CliError;

pub const KEY_ENV: &str = "DPFP_KEY";

/// Reads the secret key from `path`, or from `DPFP_KEY` when no path is given.
/// A single trailing newline in a key file is ignored.
pub fn load_key(path: Option<&Path>) -> Result<(SecretKey, &'static str), CliError> {
    let (bytes, source) = match path {
        Some(p) => {
            let mut b = std::fs::read(p)
                .map_err(|e| CliError::data(format!("cannot read key file {}: {e}", p.display())))?;
            if b.last() == Some(&b'\n') {
                b.pop();
                if b.last() == Some(&b'\r') {
                    b.pop();
                }
            }
            (b, "file")
        }
        None => match std::env::var_os(KEY_ENV) {
            Some(v) => (v.into_encoded_bytes(), "env"),
            None => {
                return Err(CliError::usage(format!(
                    "no secret key: pass --key-file or set {KEY_ENV}"
                )))
            }
        },
    };
    Ok((SecretKey::new(bytes)?, source))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| CliError::data(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(dpfp::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Record of one run: tool version, parameters, seeds and input digests.
/// Contains no timestamps so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    parameters: Map<String, Value>,
    seeds: Map<String, Value>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        Self {
            tool: "dpfp",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            parameters: Map::new(),
            seeds: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        self.parameters
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), Value::from(value));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Writes the manifest next to `artifact` as `<artifact>.manifest.json`.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf, CliError> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        write_json(&path, self)?;
        Ok(path)
    }
}
