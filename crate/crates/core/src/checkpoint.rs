//! Parameter checkpoints: a JSON header listing tensor names and shapes,
//! length-prefixed, followed by the raw buffers as little-endian doubles.
//! Round trips are bit-exact.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

const MAGIC: &[u8; 8] = b"COLB0001";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = params.params();
    let header = Header {
        tensors: tensors
            .iter()
            .map(|p| HeaderEntry { name: p.name.to_string(), shape: p.shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for p in tensors {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::fsio::atomic_write(path, &out)
}

/// Loads a checkpoint into a parameter skeleton built from the same
/// configuration; names and shapes must match exactly.
pub fn load_into(params: &mut ModelParams, path: &Path) -> Result<()> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;

    let expected = params.params();
    if header.tensors.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, config expects {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (entry, p) in header.tensors.iter().zip(&expected) {
        if entry.name != p.name || entry.shape != p.shape {
            return Err(Error::Config(format!(
                "checkpoint tensor {} {:?} does not match configured {} {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
    }

    let mut values = Vec::with_capacity(expected.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|e| {
            Error::Data(format!("checkpoint truncated while reading {}: {e}", entry.name))
        })?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(vals);
    }
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            trailing.len()
        )));
    }
    params.load_values(&values)
}

/// Serializes a checkpoint to bytes without touching disk; used by the
/// determinism tests.
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let dir = std::env::temp_dir();
    let path = dir.join(format!(
        "ckpt-{}-{:x}.bin",
        std::process::id(),
        params.params().iter().map(|p| p.numel()).sum::<usize>()
    ));
    save(params, &path)?;
    let bytes = std::fs::read(&path)?;
    std::fs::remove_file(&path)?;
    Ok(bytes)
}
