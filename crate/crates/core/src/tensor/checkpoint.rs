//! Directory checkpoints: `manifest.txt` (text) plus `weights.bin` (raw f64 LE).
//!
//! The manifest lists every tensor as `tensor=name;d0,d1,..;offset;count`
//! (offset and count in values), arbitrary `meta.key=value` pairs, and the
//! SHA-256 of the payload. Saving goes through a sibling temp directory that
//! is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

const FORMAT: &str = "singlem-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint payload hash mismatch (expected {expected}, found {actual})")]
    Integrity { expected: String, actual: String },
    #[error("checkpoint has no tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint metadata {key} is {found:?}, expected {expected:?}")]
    MetaMismatch {
        key: String,
        expected: String,
        found: Option<String>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named tensors and string metadata, in deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Fails unless `key` is present with exactly `expected`.
    pub fn expect_meta(&self, key: &str, expected: &str) -> Result<(), CheckpointError> {
        match self.meta(key) {
            Some(v) if v == expected => Ok(()),
            found => Err(CheckpointError::MetaMismatch {
                key: key.to_string(),
                expected: expected.to_string(),
                found: found.map(str::to_string),
            }),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push((name.to_string(), StoredTensor { shape, values }));
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Values of `name`, checked against `shape`.
    pub fn values(&self, name: &str, shape: &[usize]) -> Result<&[f64], CheckpointError> {
        let t = self.tensor(name)?;
        if t.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(&t.values)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    fn encode(&self) -> (String, Vec<u8>) {
        let mut payload = Vec::new();
        let mut lines = vec![
            format!("format={FORMAT}"),
            format!("version={VERSION}"),
            "dtype=f64le".into(),
        ];
        for (k, v) in &self.meta {
            lines.push(format!("meta.{k}={v}"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
            lines.push(format!("tensor={name};{};{offset};{}", dims.join(","), t.values.len()));
            offset += t.values.len();
            for v in &t.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        lines.push(format!("payload_sha256={}", hex::encode(Sha256::digest(&payload))));
        let mut manifest = lines.join("\n");
        manifest.push('\n');
        (manifest, payload)
    }

    /// Writes `dir` atomically, replacing any previous checkpoint there.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let (manifest, payload) = self.encode();
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let name = dir
            .file_name()
            .ok_or_else(|| CheckpointError::Malformed(format!("bad checkpoint path {}", dir.display())))?;
        let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        fs::write(tmp.join(PAYLOAD), &payload).map_err(io_err(&tmp))?;
        fs::write(tmp.join(MANIFEST), manifest).map_err(io_err(&tmp))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io_err(dir))
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST);
        let ppath = dir.join(PAYLOAD);
        let manifest = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let payload = fs::read(&ppath).map_err(io_err(&ppath))?;

        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("line without '=': {line}")))?;
            if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else if k == "tensor" {
                entries.push(parse_tensor_line(v)?);
            } else {
                header.insert(k, v);
            }
        }
        if header.get("format") != Some(&FORMAT) {
            return Err(CheckpointError::Malformed("missing or wrong format tag".into()));
        }
        let version: u32 = header
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Malformed("missing version".into()))?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if header.get("dtype") != Some(&"f64le") {
            return Err(CheckpointError::Malformed("dtype must be f64le".into()));
        }
        let expected = header
            .get("payload_sha256")
            .ok_or_else(|| CheckpointError::Malformed("missing payload hash".into()))?;
        let actual = hex::encode(Sha256::digest(&payload));
        if *expected != actual {
            return Err(CheckpointError::Integrity {
                expected: expected.to_string(),
                actual,
            });
        }

        let total = payload.len() / 8;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset, count) in entries {
            if shape.iter().product::<usize>() != count || offset + count > total {
                return Err(CheckpointError::Malformed(format!("bad extent for {name}")));
            }
            let values = payload[offset * 8..(offset + count) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, StoredTensor { shape, values }));
        }
        Ok(Self { meta, tensors })
    }
}

fn parse_tensor_line(v: &str) -> Result<(String, Vec<usize>, usize, usize), CheckpointError> {
    let bad = || CheckpointError::Malformed(format!("bad tensor entry: {v}"));
    let parts: Vec<&str> = v.split(';').collect();
    if parts.len() != 4 || parts[0].is_empty() {
        return Err(bad());
    }
    let shape = if parts[1].is_empty() {
        Vec::new()
    } else {
        parts[1]
            .split(',')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>, _>>()?
    };
    let offset = parts[2].parse().map_err(|_| bad())?;
    let count = parts[3].parse().map_err(|_| bad())?;
    Ok((parts[0].to_string(), shape, offset, count))
}
