//! Checkpoint file format.
//!
//! Layout: 8-byte little-endian header length, a JSON header listing the
//! format version, dtype, and per-parameter name/shape/offset, then the
//! payload of little-endian f32 values in header order. Writes go through a
//! temp file and an atomic rename.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION.to_string(),
        dtype: "f32".to_string(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut payload = Vec::with_capacity(offset * 4);
    for p in params.iter() {
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load checkpoint values into an existing parameter set. Every parameter in
/// `params` must be present with a matching shape.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    let mut f = fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {:?}",
            header.format_version
        )));
    }
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated for {:?}",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        let param = params.get_mut(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint has unknown parameter {:?}", entry.name))
        })?;
        if param.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {:?}: checkpoint {:?}, model {:?}",
                entry.name,
                entry.shape,
                param.value.shape()
            )));
        }
        param.value = tensor;
    }
    let loaded: std::collections::BTreeSet<&str> =
        header.tensors.iter().map(|t| t.name.as_str()).collect();
    for p in params.iter() {
        if !loaded.contains(p.name.as_str()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint missing parameter {:?}",
                p.name
            )));
        }
    }
    Ok(())
}
