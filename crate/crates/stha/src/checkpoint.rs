//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `STHACKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! tensor as little-endian `f64` in header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stha_core::hierarchy::{ArchitectureConfig, Model};
use stha_core::train::PhaseReport;
use stha_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"STHACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Completed (or, for periodic saves, partially completed) phases.
    pub history: Vec<PhaseReport>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureConfig,
    seed: u64,
    history: Vec<PhaseReport>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.model.store();
        let header = Header {
            architecture: self.model.config().clone(),
            seed: self.seed,
            history: self.history.clone(),
            params: store
                .ids()
                .map(|id| ParamEntry {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * store.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CliError::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, e.to_string()))?;
        let mut model = Model::new(header.architecture, header.seed)?;
        let mut data = body[hlen..].chunks_exact(8);
        let mut tensors = Vec::with_capacity(header.params.len());
        {
            let store = model.store();
            if store.len() != header.params.len() {
                return Err(corrupt(
                    path,
                    format!(
                        "{} stored tensors for a model of {}",
                        header.params.len(),
                        store.len()
                    ),
                ));
            }
            for (id, entry) in store.ids().zip(&header.params) {
                if store.name(id) != entry.name {
                    return Err(corrupt(
                        path,
                        format!(
                            "parameter {} found where {} was expected",
                            entry.name,
                            store.name(id)
                        ),
                    ));
                }
                let n: usize = entry.shape.iter().product();
                let values: Vec<f64> = data
                    .by_ref()
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if values.len() != n {
                    return Err(corrupt(path, "truncated parameter data"));
                }
                tensors.push(Tensor::from_vec(&entry.shape, values)?);
            }
        }
        if data.next().is_some() || !data.remainder().is_empty() {
            return Err(corrupt(path, "trailing bytes after parameter data"));
        }
        model.store_mut().load(tensors)?;
        Ok(Self {
            model,
            seed: header.seed,
            history: header.history,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(&self.to_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
