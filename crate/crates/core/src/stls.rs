//! STLS1: a minimal portable tensor file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STLS" | version: u16 = 1 | dtype: u8 | ndim: u8 | dims: ndim × u32 | payload
//! ```
//!
//! dtype codes are 0 = float32, 1 = float64, 2 = uint8. The payload is the
//! row-major element buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"STLS";
pub const VERSION: u16 = 1;

/// Element types with a fixed little-endian encoding.
pub trait StlsElement: Element {
    fn write_le(values: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl StlsElement for u8 {
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.extend_from_slice(values);
    }
    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes.to_vec()
    }
}

macro_rules! float_le {
    ($t:ty, $n:expr) => {
        impl StlsElement for $t {
            fn write_le(values: &[Self], out: &mut Vec<u8>) {
                out.reserve(values.len() * $n);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            fn read_le(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($n)
                    .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk size")))
                    .collect()
            }
        }
    };
}

float_le!(f32, 4);
float_le!(f64, 8);

/// A decoded STLS1 tensor of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::Float32,
            AnyTensor::F64(_) => DType::Float64,
            AnyTensor::U8(_) => DType::Uint8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

pub fn encode<T: StlsElement>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let ndim = u8::try_from(tensor.shape().len())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", tensor.shape().len())))?;
    let mut out = Vec::with_capacity(8 + 4 * usize::from(ndim) + tensor.numel() * T::DTYPE.size_of());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    T::write_le(tensor.data(), &mut out);
    Ok(out)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let header = bytes.get(..8).ok_or_else(|| Error::Format("truncated header".into()))?;
    if header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &header[..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(header[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", header[6])))?;
    let ndim = usize::from(header[7]);
    let dims_end = 8 + 4 * ndim;
    let dims_bytes = bytes.get(8..dims_end).ok_or_else(|| Error::Format("truncated dims".into()))?;
    let shape: Vec<usize> = dims_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let payload_len = numel
        .and_then(|n| n.checked_mul(dtype.size_of()))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != payload_len {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} of {dtype} needs {payload_len}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::Float32 => AnyTensor::F32(Tensor::new(shape, f32::read_le(payload))?),
        DType::Float64 => AnyTensor::F64(Tensor::new(shape, f64::read_le(payload))?),
        DType::Uint8 => AnyTensor::U8(Tensor::new(shape, u8::read_le(payload))?),
    })
}

/// Decode and require a particular element type.
pub fn decode<T: StlsElement>(bytes: &[u8]) -> Result<Tensor<T>> {
    let any = decode_any(bytes)?;
    let found = any.dtype();
    let mismatch = || Error::DTypeMismatch {
        expected: T::DTYPE,
        found,
    };
    // Route through `dyn Any` to recover the concrete type without unsafe.
    let boxed: Box<dyn std::any::Any> = match any {
        AnyTensor::F32(t) => Box::new(t),
        AnyTensor::F64(t) => Box::new(t),
        AnyTensor::U8(t) => Box::new(t),
    };
    boxed.downcast::<Tensor<T>>().map(|b| *b).map_err(|_| mismatch())
}

pub fn write<T: StlsElement>(tensor: &Tensor<T>, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(tensor)?)?;
    Ok(())
}

pub fn read<T: StlsElement>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: StlsElement>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: StlsElement>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read(BufReader::new(File::open(path)?))
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_any(&std::fs::read(path)?)
}
