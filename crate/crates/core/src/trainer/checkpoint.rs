//! Binary tensor container.
//!
//! ```text
//! "LRQT" | version u16 | count u32 | count × tensor
//! tensor: name_len u16 | name (UTF-8) | dtype u8 | ndim u8 | dims u32… | payload
//! ```
//!
//! All integers little-endian. Payload sizes follow from dtype and dims;
//! packed nibbles take `⌈n/2⌉` bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const MAGIC: [u8; 4] = *b"LRQT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    Bf16 = 2,
    I8 = 3,
    PackedNibbles = 4,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F64,
            1 => DType::F32,
            2 => DType::Bf16,
            3 => DType::I8,
            4 => DType::PackedNibbles,
            _ => return None,
        })
    }

    pub fn payload_len(self, n: usize) -> usize {
        match self {
            DType::F64 => 8 * n,
            DType::F32 => 4 * n,
            DType::Bf16 => 2 * n,
            DType::I8 => n,
            DType::PackedNibbles => n.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![m.rows() as u32, m.cols() as u32],
            payload: m.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_i8(name: impl Into<String>, values: &[i8]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::I8,
            dims: vec![values.len() as u32],
            payload: values.iter().map(|&v| v as u8).collect(),
        }
    }

    pub fn from_bytes(name: impl Into<String>, dtype: DType, dims: Vec<u32>, payload: Vec<u8>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            dtype,
            dims,
            payload,
        };
        let expected = dtype.payload_len(t.numel());
        if t.payload.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {}: payload of {} bytes, expected {expected}",
                t.name,
                t.payload.len()
            )));
        }
        Ok(t)
    }

    /// Reads an `f64` tensor of rank 2 (rank 1 becomes a single row).
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dtype != DType::F64 {
            return Err(Error::Input(format!("tensor {} is not f64", self.name)));
        }
        let (rows, cols) = match self.dims[..] {
            [n] => (1, n as usize),
            [r, c] => (r as usize, c as usize),
            _ => return Err(Error::Input(format!("tensor {} is not a matrix", self.name))),
        };
        let data = self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn to_i8(&self) -> Result<Vec<i8>> {
        if self.dtype != DType::I8 {
            return Err(Error::Input(format!("tensor {} is not i8", self.name)));
        }
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Input(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Input("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Input(format!("tensor name too long: {}", t.name)))?;
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| Error::Input(format!("tensor {} has too many dims", t.name)))?;
            if t.payload.len() != t.dtype.payload_len(t.numel()) {
                return Err(Error::Shape(format!("tensor {} payload size mismatch", t.name)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype as u8);
            out.push(ndim);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(0, format!("bad magic {magic:02x?}")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err(start + 2, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| format_err(at, format!("unknown dtype {code}")))?;
            let ndim = r.take(1, "ndim")?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| format_err(at, "tensor size overflows"))?;
            let payload = r.take(dtype.payload_len(n), "payload")?.to_vec();
            tensors.push(Tensor {
                name,
                dtype,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
