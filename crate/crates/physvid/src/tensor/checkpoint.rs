//! On-disk tensor bundle format.
//!
//! Layout: an 8-byte little-endian header length, a JSON header describing
//! dtype, ordered tensor names/shapes and free-form string metadata, then the
//! raw little-endian buffers concatenated in header order. Saving and
//! re-loading a bundle reproduces the file byte-for-byte, which makes
//! checkpoint identity checkable with a plain content hash.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    /// Free-form run metadata (config hash, step counter, ...). BTreeMap so
    /// the serialized header is key-ordered and stable.
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A loaded checkpoint: named tensors in file order plus metadata.
#[derive(Debug)]
pub struct CheckpointData<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: BTreeMap<String, String>,
}

impl<T> CheckpointData<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Write named tensors and metadata to `path`.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    tensors: &[(String, &Tensor<T>)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in tensors {
        file.write_all(&t.le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`] with scalar type `T`.
/// Fails with a state error if the file's dtype does not match `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointData<T>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::State(format!(
            "unsupported checkpoint version {} (expected {})",
            header.version, FORMAT_VERSION
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::State(format!(
            "checkpoint stores {} tensors but {} was requested",
            header.dtype.as_str(),
            T::DTYPE.as_str()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; numel * T::BYTES];
        file.read_exact(&mut buf)?;
        tensors.push((entry.name, Tensor::from_le_bytes(entry.shape, &buf)?));
    }
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::State(format!(
            "checkpoint has {} trailing bytes beyond declared tensors",
            trailing.len()
        )));
    }
    Ok(CheckpointData {
        tensors,
        meta: header.meta,
    })
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
