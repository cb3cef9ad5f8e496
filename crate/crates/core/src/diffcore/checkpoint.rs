//! Checkpoint files: named parameter arrays with optimizer state,
//! integrity-hashed so samplers can refuse to run against a corrupted or
//! truncated file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic            7 bytes   b"TWCKPT\0"
//! format_version   u32
//! adam_step        u64
//! n_params         u32
//! per parameter:
//!   name_len u32, name bytes, rows u64, cols u64,
//!   value f64s, adam_m f64s, adam_v f64s   (row-major)
//! sha256 digest    32 bytes over everything above
//! ```

use super::params::{ParamEntry, ParamError, ParamStore};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 7] = b"TWCKPT\0";

fn push_array(buf: &mut Vec<u8>, arr: &Array2<f64>) {
    for v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&store.step.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for (name, entry) in &store.entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(entry.value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(entry.value.ncols() as u64).to_le_bytes());
        push_array(&mut buf, &entry.value);
        push_array(&mut buf, &entry.adam_m);
        push_array(&mut buf, &entry.adam_v);
    }
    buf
}

/// Content hash of a store's checkpoint encoding (hex). Chain files store
/// this as the id of the proposal model that produced them.
pub fn checkpoint_id(store: &ParamStore) -> String {
    let digest = Sha256::digest(&encode(store));
    hex::encode(digest)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<String, ParamError> {
    let mut buf = encode(store);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
    Ok(hex::encode(digest))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String), ParamError> {
    let err = |msg: String| ParamError::Checkpoint(msg);
    let buf = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    if buf.len() < MAGIC.len() + 32 {
        return Err(err(format!("{}: truncated checkpoint", path.display())));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let want = Sha256::digest(body);
    if want.as_slice() != digest {
        return Err(err(format!(
            "{}: checkpoint hash mismatch (corrupted or tampered file)",
            path.display()
        )));
    }
    let mut r = body;
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|e| err(e.to_string()))?;
    if &magic != MAGIC {
        return Err(err("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let step = read_u64(&mut r)?;
    let n_params = read_u32(&mut r)? as usize;
    let mut store = ParamStore { entries: Default::default(), step };
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| err(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| err(e.to_string()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let value = read_array(&mut r, rows, cols)?;
        let adam_m = read_array(&mut r, rows, cols)?;
        let adam_v = read_array(&mut r, rows, cols)?;
        store.entries.insert(
            name,
            ParamEntry { value, grad: Array2::zeros((rows, cols)), adam_m, adam_v },
        );
    }
    Ok((store, hex::encode(digest)))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, ParamError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, ParamError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_array(r: &mut &[u8], rows: usize, cols: usize) -> Result<Array2<f64>, ParamError> {
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes).map_err(|e| ParamError::Checkpoint(e.to_string()))?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| ParamError::Checkpoint(e.to_string()))
}
