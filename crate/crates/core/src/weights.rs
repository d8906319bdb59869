//! `UCMW` binary tensor files.
//!
//! Layout, all integers little-endian: magic `UCMW`, version `u32` = 1, tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, dtype `u8`
//! (0 = f32), rank `u8`, dims `u32` each, raw f32 payload. Reading and
//! re-writing a file reproduces it byte for byte.

use std::collections::HashSet;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UCMW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("i/o: {0}")]
    Stream(#[from] io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("weight file is truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{name}`: unsupported dtype code {code}")]
    DType { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8")]
    Utf8,
    #[error("duplicate tensor name `{0}`")]
    Duplicate(String),
    #[error("tensor `{name}`: shape {found:?} does not match the model's {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from weight file")]
    Missing(String),
    #[error("tensor `{0}` is not part of the model")]
    Unexpected(String),
    #[error("tensor `{0}`: {1}")]
    Invalid(String, String),
}

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

fn u32_of(n: usize, what: &str) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} exceeds u32")))
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<(), WeightError> {
    let mut seen = HashSet::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(WeightError::Duplicate(name.clone()));
        }
        let rank = u8::try_from(t.rank()).map_err(|_| WeightError::Invalid(name.clone(), "rank exceeds 255".into()))?;
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, rank])?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), WeightError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WeightError::Truncated,
        _ => WeightError::Stream(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, WeightError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<NamedTensors, WeightError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic).map_err(|e| match e {
        WeightError::Truncated => WeightError::BadMagic,
        e => e,
    })?;
    if &magic != MAGIC {
        return Err(WeightError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(WeightError::Version { found: version });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = Vec::new();
        // bounded read so a corrupt length cannot trigger a huge allocation
        (&mut r).take(len as u64).read_to_end(&mut name)?;
        if name.len() != len {
            return Err(WeightError::Truncated);
        }
        let name = String::from_utf8(name).map_err(|_| WeightError::Utf8)?;
        let mut hdr = [0u8; 2];
        read_exact(&mut r, &mut hdr)?;
        if hdr[0] != DTYPE_F32 {
            return Err(WeightError::DType { name, code: hdr[0] });
        }
        let dims = (0..hdr[1]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightError::Invalid(name.clone(), format!("dims {dims:?} overflow")))?;
        let mut payload = Vec::new();
        (&mut r).take(bytes as u64).read_to_end(&mut payload)?;
        if payload.len() != bytes {
            return Err(WeightError::Truncated);
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&dims, data).map_err(|e| WeightError::Invalid(name.clone(), e.to_string()))?;
        if !seen.insert(name.clone()) {
            return Err(WeightError::Duplicate(name));
        }
        out.push((name, t));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(WeightError::TrailingBytes(rest.len()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), WeightError> {
    let io_err = |source| WeightError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = std::fs::File::create(path).map_err(io_err)?;
    write_tensors(io::BufWriter::new(f), tensors)
}

pub fn load(path: &Path) -> Result<NamedTensors, WeightError> {
    let f = std::fs::File::open(path).map_err(|source| WeightError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_tensors(io::BufReader::new(f))
}

/// Every stored tensor (learnable and running statistics), in store order.
pub fn store_tensors(store: &ParamStore<f32>) -> NamedTensors {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

/// Copy tensors into `store` by name. Every store entry must be present with
/// its exact shape; the first offending entry (store order) is reported.
/// Names outside the store are ignored only when `allow_extra`.
pub fn load_into_store(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)], allow_extra: bool) -> Result<(), WeightError> {
    let by_name: std::collections::HashMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for e in store.entries() {
        let t = by_name.get(e.name.as_str()).ok_or_else(|| WeightError::Missing(e.name.clone()))?;
        if t.shape() != e.value.shape() {
            return Err(WeightError::ShapeMismatch {
                name: e.name.clone(),
                expected: e.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    if !allow_extra {
        if let Some((n, _)) = tensors.iter().find(|(n, _)| store.id_of(n).is_none()) {
            return Err(WeightError::Unexpected(n.clone()));
        }
    }
    for e in store.entries_mut() {
        e.value = by_name[e.name.as_str()].clone();
    }
    Ok(())
}

/// Split a `u64` into four 16-bit limbs, each exactly representable in f32.
pub fn encode_u64(v: u64) -> Tensor<f32> {
    Tensor::from_fn(&[4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

pub fn decode_u64(name: &str, t: &Tensor<f32>) -> Result<u64, WeightError> {
    if t.shape() != [4] {
        return Err(WeightError::ShapeMismatch {
            name: name.to_string(),
            expected: vec![4],
            found: t.shape().to_vec(),
        });
    }
    let mut v = 0u64;
    for (i, &limb) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&limb) || limb.fract() != 0.0 {
            return Err(WeightError::Invalid(name.to_string(), format!("bad limb {limb}")));
        }
        v |= (limb as u64) << (16 * i);
    }
    Ok(v)
}

pub fn encode_f64(v: f64) -> Tensor<f32> {
    encode_u64(v.to_bits())
}

pub fn decode_f64(name: &str, t: &Tensor<f32>) -> Result<f64, WeightError> {
    decode_u64(name, t).map(f64::from_bits)
}
