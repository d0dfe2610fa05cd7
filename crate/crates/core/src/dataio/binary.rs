//! Little-endian binary containers: tensors (`ORCT`), validity bitmaps
//! (`ORCV`) and merge-network checkpoints (`ORCW`).

use super::DataioError;
use crate::mvpm::{MergeNetwork, NetworkConfig};

pub const TENSOR_MAGIC: [u8; 4] = *b"ORCT";
pub const VALIDITY_MAGIC: [u8; 4] = *b"ORCV";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ORCW";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataioError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DataioError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DataioError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, DataioError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, DataioError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, DataioError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DataioError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, DataioError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), DataioError> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(DataioError::BadMagic { expected, found });
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(DataioError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataioError> {
        if self.pos != self.buf.len() {
            return Err(DataioError::TrailingBytes {
                offset: self.pos,
                extra: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn header(magic: [u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

fn dim(n: usize) -> Result<u32, DataioError> {
    u32::try_from(n).map_err(|_| DataioError::Shape(format!("dimension {n} exceeds u32")))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn first_nan(&self) -> Option<usize> {
        match self {
            TensorData::F32(v) => v.iter().position(|x| x.is_nan()),
            TensorData::F64(v) => v.iter().position(|x| x.is_nan()),
        }
    }
}

/// Row-major `height × width × channels` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(width: usize, height: usize, channels: usize, data: TensorData) -> Result<Self, DataioError> {
        if data.len() != width * height * channels {
            return Err(DataioError::Shape(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataioError> {
        if self.data.len() != self.width * self.height * self.channels {
            return Err(DataioError::Shape("payload length".into()));
        }
        if let Some(index) = self.data.first_nan() {
            return Err(DataioError::NaN { index });
        }
        let mut out = header(TENSOR_MAGIC);
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&dim(d)?.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                out.push(DTYPE_F32);
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            TensorData::F64(v) => {
                out.push(DTYPE_F64);
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataioError> {
        let mut c = Cursor::new(bytes);
        c.magic(TENSOR_MAGIC)?;
        let width = c.u32()? as usize;
        let height = c.u32()? as usize;
        let channels = c.u32()? as usize;
        let n = width
            .checked_mul(height)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| DataioError::Shape("tensor size overflows".into()))?;
        let data = match c.u8()? {
            DTYPE_F32 => {
                let raw = c.take(n.checked_mul(4).ok_or_else(|| DataioError::Shape("overflow".into()))?)?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            DTYPE_F64 => {
                let raw = c.take(n.checked_mul(8).ok_or_else(|| DataioError::Shape("overflow".into()))?)?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(DataioError::UnknownDtype(other)),
        };
        c.finish()?;
        if let Some(index) = data.first_nan() {
            return Err(DataioError::NaN { index });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Packed per-pixel validity, least significant bit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityFile {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
}

impl ValidityFile {
    pub fn encode(&self) -> Result<Vec<u8>, DataioError> {
        if self.valid.len() != self.width * self.height {
            return Err(DataioError::Shape("validity length".into()));
        }
        let mut out = header(VALIDITY_MAGIC);
        out.extend_from_slice(&dim(self.width)?.to_le_bytes());
        out.extend_from_slice(&dim(self.height)?.to_le_bytes());
        out.extend(
            self.valid
                .chunks(8)
                .map(|bits| bits.iter().enumerate().fold(0u8, |b, (i, &v)| b | ((v as u8) << i))),
        );
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataioError> {
        let mut c = Cursor::new(bytes);
        c.magic(VALIDITY_MAGIC)?;
        let width = c.u32()? as usize;
        let height = c.u32()? as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| DataioError::Shape("bitmap size overflows".into()))?;
        let packed = c.take(n.div_ceil(8))?;
        c.finish()?;
        let valid: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
            return Err(DataioError::Shape("nonzero padding bits".into()));
        }
        Ok(Self { width, height, valid })
    }
}

pub fn encode_checkpoint(net: &MergeNetwork) -> Result<Vec<u8>, DataioError> {
    let cfg = &net.config;
    if let Some(index) = net.params().iter().position(|x| x.is_nan()) {
        return Err(DataioError::NaN { index });
    }
    let mut out = header(CHECKPOINT_MAGIC);
    out.extend_from_slice(&dim(cfg.classes)?.to_le_bytes());
    for w in cfg.widths {
        out.extend_from_slice(&dim(w)?.to_le_bytes());
    }
    out.extend_from_slice(&cfg.depth_scale.to_le_bytes());
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    net.params()
        .iter()
        .for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MergeNetwork, DataioError> {
    let mut c = Cursor::new(bytes);
    c.magic(CHECKPOINT_MAGIC)?;
    let classes = c.u32()? as usize;
    let widths = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let depth_scale = c.f64()?;
    let dropout = c.f64()?;
    let count = usize::try_from(c.u64()?).map_err(|_| DataioError::Shape("parameter count".into()))?;
    let raw = c.take(
        count
            .checked_mul(8)
            .ok_or_else(|| DataioError::Shape("overflow".into()))?,
    )?;
    c.finish()?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(index) = params.iter().position(|x| x.is_nan()) {
        return Err(DataioError::NaN { index });
    }
    let config = NetworkConfig {
        classes,
        widths,
        depth_scale,
        dropout,
    };
    Ok(MergeNetwork::from_params(config, params)?)
}
