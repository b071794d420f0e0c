//! Single-file tensor container shared by training checkpoints and
//! generator weights.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (metadata plus a tensor index), then the raw
//! little-endian tensor payload.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"LCOMPASS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct TensorFile<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> TensorFile<T> {
    pub fn into_map(self) -> HashMap<String, ArrayD<T>> {
        self.tensors.into_iter().collect()
    }
}

pub fn encode<T: Scalar>(meta: &serde_json::Value, tensors: &[(String, ArrayViewD<'_, T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        index.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.iter() {
            v.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors: index,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TensorFile<T>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Parse("missing container magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "container format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Parse("header length exceeds file size".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Parse(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Incompatible(format!(
            "tensors stored as {}, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(len * T::BYTES)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Parse(format!("tensor `{}` runs past end of file", entry.name)))?;
        let values: Vec<T> = payload[entry.offset..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Parse(format!("tensor `{}`: {e}", entry.name)))?;
        tensors.push((entry.name, arr));
    }
    Ok(TensorFile {
        meta: header.meta,
        tensors,
    })
}

/// Writes atomically: the previous file at `path` survives a failed write.
pub fn write<T: Scalar>(path: &Path, meta: &serde_json::Value, tensors: &[(String, ArrayViewD<'_, T>)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let tmp = path.with_extension("tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read<T: Scalar>(path: &Path) -> Result<TensorFile<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
