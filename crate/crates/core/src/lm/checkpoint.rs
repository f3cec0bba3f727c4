//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `BLMCKPT1`, a little-endian `u64` header
//! length, a JSON header (version, config, vocabulary, tensor manifest),
//! then every tensor's `f64` values little-endian in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Params, TrainMask};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"BLMCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let tensors = model.params.tensors();
    let header = Header {
        version: VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors: tensors
            .iter()
            .map(|t| (format!("{}.{}", t.group, t.name), t.shape.clone()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    header.config.validate()?;
    let mut params = Params::zeros(&header.config);
    let mut data = &bytes[16 + hlen..];
    {
        let tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        for (t, (name, _)) in tensors.into_iter().zip(&header.tensors) {
            if &format!("{}.{}", t.group, t.name) != name {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
            let need = t.data.len() * 8;
            if data.len() < need {
                return Err(bad("truncated tensor data"));
            }
            for (x, chunk) in t.data.iter_mut().zip(data[..need].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[need..];
        }
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let n_blocks = header.config.n_blocks;
    Ok(ModelState {
        config: header.config,
        vocab: header.vocab,
        params,
        mask: TrainMask::frozen(n_blocks),
    })
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
