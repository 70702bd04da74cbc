//! Versioned JSON checkpoint container.
//!
//! ```json
//! { "format": "prehab-checkpoint", "version": 1, "kind": "model", "payload": { ... } }
//! ```
//!
//! Floats round-trip exactly, so a reloaded checkpoint reproduces every
//! downstream number bit for bit. Writes go through a temporary file and a
//! rename so an interrupted run never leaves a truncated checkpoint.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "prehab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected}, found {found}")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

#[derive(Serialize)]
struct ContainerRef<'a, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("json.tmp");
    let file = fs::File::create(&tmp).map_err(io)?;
    let mut out = BufWriter::new(file);
    let container = ContainerRef {
        format: FORMAT,
        version: VERSION,
        kind,
        payload,
    };
    serde_json::to_writer(&mut out, &container).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.flush().map_err(io)?;
    drop(out);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, CheckpointError> {
    let file = fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let container: Container<T> =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    let header = |expected: String, found: String| CheckpointError::Header {
        path: path.to_path_buf(),
        expected,
        found,
    };
    if container.format != FORMAT {
        return Err(header(
            format!("format {FORMAT}"),
            format!("format {}", container.format),
        ));
    }
    if container.version != VERSION {
        return Err(header(
            format!("version {VERSION}"),
            format!("version {}", container.version),
        ));
    }
    if container.kind != kind {
        return Err(header(format!("kind {kind}"), format!("kind {}", container.kind)));
    }
    Ok(container.payload)
}
