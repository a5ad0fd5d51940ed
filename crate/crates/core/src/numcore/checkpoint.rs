//! Checkpoint file: one JSON header line, then every parameter value as a
//! little-endian f64, in store order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::ParamStore;
use crate::numcore::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "prism25d-checkpoint";
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u64,
    /// Model dimensions; opaque to this module.
    pub model: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamMeta>,
}

impl CheckpointHeader {
    pub fn new(model: serde_json::Value, seed: u64, step: u64, store: &ParamStore) -> Self {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            seed,
            step,
            params: store
                .iter()
                .map(|(_, name, t)| ParamMeta {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for (_, _, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a fresh store with the recorded names and shapes.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let value: serde_json::Value = serde_json::from_slice(&line)?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Format(format!("not a {CHECKPOINT_FORMAT} file")));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value)?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("checkpoint blob truncated".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(meta.name.clone(), Tensor::new(meta.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameter blob", rest.len())));
    }
    Ok((header, store))
}
