//! The on-disk tensor container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "FRDA" | u32 version = 1 | u32 tensor count
//! per tensor:
//!   u16 name length | name bytes (ASCII)
//!   u8 dtype (0 = f32, 1 = u8) | u8 rank | rank × u64 dims
//!   payload (C-order) | u64 FNV-1a checksum of the payload bytes
//! ```
//!
//! Real tensors are stored as f32; byte tensors (labels, metadata strings)
//! as u8. Reads verify magic, version, and per-tensor checksums, so payload
//! corruption is always detected.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FRDA";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// One stored tensor: f32 payload for reals, u8 for bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32 { dims: Vec<usize>, values: Vec<f32> },
    U8 { dims: Vec<usize>, bytes: Vec<u8> },
}

impl Entry {
    pub fn dims(&self) -> &[usize] {
        match self {
            Entry::F32 { dims, .. } | Entry::U8 { dims, .. } => dims,
        }
    }

    fn payload_bytes(&self) -> Vec<u8> {
        match self {
            Entry::F32 { values, .. } => {
                let mut out = Vec::with_capacity(values.len() * 4);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            Entry::U8 { bytes, .. } => bytes.clone(),
        }
    }
}

/// An ordered name → tensor map with container-format persistence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

fn check_name(name: &str) -> Result<()> {
    if !name.is_ascii() || name.is_empty() {
        return Err(Error::format(format!(
            "tensor name must be non-empty ASCII, got {name:?}"
        )));
    }
    if name.len() > u16::MAX as usize {
        return Err(Error::format(format!("tensor name too long: {name:?}")));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a real tensor (quantized to f32). Errors on name collision.
    pub fn insert_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        check_name(name)?;
        if self.entries.contains_key(name) {
            return Err(Error::format(format!("duplicate tensor name {name:?}")));
        }
        let values: Vec<f32> = tensor.data().iter().map(|&v| v as f32).collect();
        self.entries.insert(
            name.to_string(),
            Entry::F32 {
                dims: tensor.dims().to_vec(),
                values,
            },
        );
        Ok(())
    }

    /// Stores a byte tensor. Errors on name collision or size mismatch.
    pub fn insert_bytes(&mut self, name: &str, dims: Vec<usize>, bytes: Vec<u8>) -> Result<()> {
        check_name(name)?;
        if self.entries.contains_key(name) {
            return Err(Error::format(format!("duplicate tensor name {name:?}")));
        }
        let n: usize = dims.iter().product();
        if n != bytes.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {n} bytes, got {}",
                bytes.len()
            )));
        }
        self.entries.insert(name.to_string(), Entry::U8 { dims, bytes });
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    /// Materializes an f32 entry as an in-memory tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.entries.get(name) {
            Some(Entry::F32 { dims, values }) => Tensor::new(
                dims.clone(),
                values.iter().map(|&v| v as f64).collect(),
            ),
            Some(Entry::U8 { .. }) => Err(Error::format(format!(
                "tensor {name:?} holds bytes, not reals"
            ))),
            None => Err(Error::format(format!("missing tensor {name:?}"))),
        }
    }

    /// Raw bytes of a u8 entry.
    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Entry::U8 { bytes, .. }) => Ok(bytes),
            Some(Entry::F32 { .. }) => Err(Error::format(format!(
                "tensor {name:?} holds reals, not bytes"
            ))),
            None => Err(Error::format(format!("missing tensor {name:?}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let dtype = match entry {
                Entry::F32 { .. } => DTYPE_F32,
                Entry::U8 { .. } => DTYPE_U8,
            };
            w.write_all(&[dtype])?;
            let dims = entry.dims();
            w.write_all(&[dims.len() as u8])?;
            for &d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let payload = entry.payload_bytes();
            w.write_all(&payload)?;
            w.write_all(&fnv1a(&payload).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let name_len = read_u16(&mut r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(format!("tensor {i}: non-UTF8 name")))?;
            let mut dtype = [0u8; 1];
            read_exact(&mut r, &mut dtype, "dtype")?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "rank")?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                dims.push(read_u64(&mut r, "dim")? as usize);
            }
            let n: usize = dims.iter().product();
            let entry = match dtype[0] {
                DTYPE_F32 => {
                    let mut payload = vec![0u8; n * 4];
                    read_exact(&mut r, &mut payload, "f32 payload")?;
                    verify_checksum(&mut r, &payload, &name)?;
                    let values = payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Entry::F32 { dims, values }
                }
                DTYPE_U8 => {
                    let mut payload = vec![0u8; n];
                    read_exact(&mut r, &mut payload, "u8 payload")?;
                    verify_checksum(&mut r, &payload, &name)?;
                    Entry::U8 {
                        dims,
                        bytes: payload,
                    }
                }
                d => return Err(Error::format(format!("tensor {name:?}: bad dtype {d}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::format(format!("duplicate tensor name {name:?}")));
            }
        }
        Ok(Container { entries })
    }
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated container ({what})")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn verify_checksum(r: &mut impl Read, payload: &[u8], name: &str) -> Result<()> {
    let stored = read_u64(r, "checksum")?;
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(Error::format(format!(
            "checksum mismatch for tensor {name:?}"
        )));
    }
    Ok(())
}
