//! Self-describing checkpoint files.
//!
//! Layout: 4-byte magic `SGCK`, little-endian u32 format version, little-
//! endian u64 header length, a JSON header (architecture config, schedule
//! recipe, cascade progress, and the name/shape of every parameter array),
//! then the raw array data as little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::rng::sub_rng;
use crate::schedule::ScheduleConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SGCK";
const FORMAT_VERSION: u32 = 1;

/// Everything a checkpoint records besides the parameters themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Number of cascade phases already completed when this was written.
    pub phases_completed: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    arrays: Vec<ArrayInfo>,
}

/// Writes the network and metadata to `path`, atomically replacing any
/// existing file only after a complete write (via a sibling temp file).
pub fn save(path: &Path, net: &Denoiser<f32>, meta: &CheckpointMeta) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut arrays = Vec::new();
        net.visit_arrays(&mut |name, shape, _| {
            arrays.push(ArrayInfo { name: name.to_string(), shape: shape.to_vec() });
        });
        let header = Header { meta: meta.clone(), arrays };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        let mut write_err = None;
        net.visit_arrays(&mut |_, _, a| {
            if write_err.is_some() {
                return;
            }
            let mut bytes = Vec::with_capacity(a.len() * 4);
            for v in a {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            if let Err(e) = w.write_all(&bytes) {
                write_err = Some(Error::io(&tmp, e));
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back into a network plus its metadata.
pub fn load(path: &Path) -> Result<(Denoiser<f32>, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(format!("malformed header: {e}")))?;

    let mut stored: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::new();
    for info in &header.arrays {
        let n: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if stored.insert(info.name.clone(), (info.shape.clone(), values)).is_some() {
            return Err(bad(format!("duplicate array '{}'", info.name)));
        }
    }

    // The init values are irrelevant; every array is overwritten below.
    let mut net = Denoiser::<f32>::init(&header.meta.denoiser, &mut sub_rng(0, "checkpoint-load"))?;
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    net.visit_arrays_mut(&mut |name, shape, a| match stored.remove(name) {
        Some((stored_shape, values)) => {
            if stored_shape != shape || values.len() != a.len() {
                mismatch.push(name.to_string());
            } else {
                a.copy_from_slice(&values);
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(bad(format!("missing arrays: {}", missing.join(", "))));
    }
    if !mismatch.is_empty() {
        return Err(bad(format!("shape mismatch for: {}", mismatch.join(", "))));
    }
    if !stored.is_empty() {
        let extra: Vec<String> = stored.into_keys().collect();
        return Err(bad(format!("unknown arrays: {}", extra.join(", "))));
    }
    let mut all_finite = true;
    net.visit_arrays(&mut |_, _, a| all_finite &= a.iter().all(|v| v.is_finite()));
    if !all_finite {
        return Err(bad("non-finite parameter value".into()));
    }
    Ok((net, header.meta))
}
