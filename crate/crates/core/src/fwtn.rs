//! FWTN binary tensor format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FWTN" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64, 2 = u8) | u8 rank
//! | u32 dims[rank] | payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FWTN";
pub const VERSION: u8 = 1;

/// A decoded FWTN tensor in its stored element type.
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl RawTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            RawTensor::F32(t) => t.shape(),
            RawTensor::F64(t) => t.shape(),
            RawTensor::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            RawTensor::F32(_) => DType::F32,
            RawTensor::F64(_) => DType::F64,
            RawTensor::U8 { .. } => DType::U8,
        }
    }

    /// Converts to `T`, requiring the stored type to be exactly `T`.
    pub fn into_exact<T: Scalar>(self) -> Option<Tensor<T>> {
        match (self, T::DTYPE) {
            (RawTensor::F32(t), DType::F32) => Some(t.cast()),
            (RawTensor::F64(t), DType::F64) => Some(t.cast()),
            _ => None,
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    header(out, T::DTYPE, t.shape());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_u8(shape: &[usize], data: &[u8], out: &mut Vec<u8>) {
    header(out, DType::U8, shape);
    out.extend_from_slice(data);
}

/// Byte cursor that reports failures with the source path and offset.
pub(crate) struct Reader<'a> {
    pub path: &'a Path,
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<RawTensor> {
    let start = r.pos;
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.fail(start, format!("bad magic {magic:?}, expected \"FWTN\"")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.fail(start + 4, format!("unsupported version {version}")));
    }
    let code = r.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| r.fail(start + 5, format!("unknown dtype {code}")))?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(r.fail(at, "zero-sized dimension"));
        }
        shape.push(d);
    }
    let count: usize = shape.iter().product();
    let payload = r.take(count * dtype.size())?;
    let bad = |e: Error| r.fail(start, e.to_string());
    Ok(match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            RawTensor::F32(Tensor::new(shape, data).map_err(bad)?)
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            RawTensor::F64(Tensor::new(shape, data).map_err(bad)?)
        }
        DType::U8 => RawTensor::U8 {
            shape,
            data: payload.to_vec(),
        },
    })
}

/// Decodes a single tensor occupying all of `bytes`.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<RawTensor> {
    let mut r = Reader::new(path, bytes);
    let t = decode_from(&mut r)?;
    if !r.at_end() {
        return Err(r.fail(r.pos, "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn read(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    write_bytes(path.as_ref(), &buf)
}

pub fn write_u8(path: impl AsRef<Path>, shape: &[usize], data: &[u8]) -> Result<()> {
    let mut buf = Vec::new();
    encode_u8(shape, data, &mut buf);
    write_bytes(path.as_ref(), &buf)
}

fn write_bytes(path: &Path, buf: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(PathBuf::from(path), e))
}
