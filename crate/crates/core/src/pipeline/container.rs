//! Binary tensor container shared by checkpoints and dataset images.
//!
//! ```text
//! "EMRD"                 magic
//! u32                    format version
//! u32 + bytes            UTF-8 TOML header
//! u32                    tensor count
//! per tensor:
//!   u32 + bytes          UTF-8 name
//!   u8                   dtype code (1 = f32)
//!   u8                   rank
//!   rank × u32           dims
//!   f32 × Π dims         payload
//! ```
//!
//! All integers and floats are little-endian. Parsing is strict: truncated
//! input, unknown dtypes, invalid UTF-8 and trailing bytes are all errors.

use std::path::Path;

use crate::denoiser::NamedTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMRD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
/// Highest tensor rank accepted by the parser.
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > MAX_RANK {
            return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        Ok(TensorRecord {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn from_f64(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Result<Self> {
        let dims = shape
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large"))))
            .collect::<Result<Vec<_>>>()?;
        TensorRecord::new(name, dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_named(&self) -> NamedTensor {
        NamedTensor {
            name: self.name.clone(),
            shape: self.shape(),
            values: self.to_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    out.extend_from_slice(&u32::try_from(len).expect("length fits in u32").to_le_bytes());
}

impl Container {
    pub fn new(header: impl Into<String>) -> Self {
        Container {
            header: header.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: TensorRecord) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing from container")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, self.header.len());
        out.extend_from_slice(self.header.as_bytes());
        put_len(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_len(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header = r.string("header")?;
        let count = r.u32("tensor count")? as usize;
        // Every record needs at least 6 bytes, which bounds the allocation.
        if count > r.remaining() / 6 {
            return Err(Error::Format(format!("tensor count {count} exceeds the input size")));
        }
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name = r.string("tensor name")?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {i} ({name}): unknown dtype code {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor {i} ({name}): rank {rank} exceeds {MAX_RANK}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32("dims")?;
                numel = numel
                    .checked_mul(d as usize)
                    .ok_or_else(|| Error::Format(format!("tensor {i} ({name}): size overflows")))?;
                dims.push(d);
            }
            let bytes_needed = numel
                .checked_mul(4)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| Error::Format(format!("tensor {i} ({name}): payload truncated")))?;
            let raw = r.take(bytes_needed, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Container { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
