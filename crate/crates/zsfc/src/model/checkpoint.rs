//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  = "ZSFC"
//! version          u32      = 1
//! variant          u8       index into ModelVariant::ALL
//! dim              u32
//! n_items          u32
//! n_categories     u32
//! seed             u64
//! n_tensors        u32
//! per tensor:      name_len u32, name bytes, ndim u32, dims (u32 each),
//!                  payload offset u64 (bytes, relative to payload start)
//! payload          f32 values, tensors concatenated in canonical order
//! ```
//!
//! Saving and re-loading reproduces the parameters bit for bit, and
//! re-saving a loaded checkpoint reproduces the file bytes exactly.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ModelParams, ModelVariant};

const MAGIC: &[u8; 4] = b"ZSFC";
const VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 64;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown variant tag {0}")]
    BadVariant(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn variant_tag(variant: ModelVariant) -> u8 {
    ModelVariant::ALL
        .iter()
        .position(|&v| v == variant)
        .expect("every variant is listed") as u8
}

/// Serialize parameters to the checkpoint byte format.
pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let tensors = params.tensors();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(variant_tag(params.variant));
    header.extend_from_slice(&(params.dim as u32).to_le_bytes());
    header.extend_from_slice(&(params.n_items() as u32).to_le_bytes());
    header.extend_from_slice(&(params.n_categories() as u32).to_le_bytes());
    header.extend_from_slice(&params.seed.to_le_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let mut payload = Vec::new();
    let mut offset = 0u64;
    for (name, shape, values) in &tensors {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        for v in *values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += (values.len() * 4) as u64;
    }
    header.extend_from_slice(&payload);
    header
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deserialize parameters from the checkpoint byte format.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let tag = r.u8()?;
    let variant = *ModelVariant::ALL
        .get(tag as usize)
        .ok_or(CheckpointError::BadVariant(tag))?;
    let dim = r.u32()? as usize;
    let n_items = r.u32()? as usize;
    let n_categories = r.u32()? as usize;
    let seed = r.u64()?;
    let n_tensors = r.u32()? as usize;
    if dim == 0 {
        return Err(CheckpointError::Corrupt("zero embedding dimension".into()));
    }

    let mut params = ModelParams::<f32>::zeros(variant, dim, n_items, n_categories);
    params.seed = seed;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(name, shape, _)| (name.to_string(), shape.clone()))
        .collect();
    if n_tensors != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, header lists {n_tensors}",
            expected.len()
        )));
    }

    // Parse the tensor directory, insisting on canonical order and
    // contiguous payload so the format round-trips byte for byte.
    let mut running_offset = 0u64;
    let mut lengths = Vec::with_capacity(n_tensors);
    for (name, shape) in &expected {
        let name_len = r.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::Corrupt(format!(
                "tensor name length {name_len} out of range"
            )));
        }
        let found_name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        if found_name != name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor `{name}`, found `{found_name}`"
            )));
        }
        let ndim = r.u32()? as usize;
        if ndim != shape.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}`: expected {} dims, found {ndim}",
                shape.len()
            )));
        }
        let mut len = 1usize;
        for &want in shape {
            let got = r.u32()? as usize;
            if got != want {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor `{name}`: expected dim {want}, found {got}"
                )));
            }
            len *= got;
        }
        let offset = r.u64()?;
        if offset != running_offset {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}`: offset {offset}, expected {running_offset}"
            )));
        }
        running_offset += (len * 4) as u64;
        lengths.push(len);
    }

    for (tensor, len) in params.tensors_mut().into_iter().zip(lengths) {
        debug_assert_eq!(tensor.len(), len);
        let raw = r.take(len * 4)?;
        for (dst, chunk) in tensor.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

/// Write a checkpoint file.
pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a checkpoint file.
pub fn load(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
