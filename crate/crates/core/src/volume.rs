//! `RFSV` volume files: float intensity volumes and `u8` label maps.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::phantom::LabelVolume;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RFSV";
pub const VERSION: u32 = 1;
const WHAT: &str = "volume";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Float(Tensor<f32>),
    Labels { dims: Vec<usize>, data: Vec<u8> },
}

impl Volume {
    pub fn dims(&self) -> &[usize] {
        match self {
            Volume::Float(t) => t.shape(),
            Volume::Labels { dims, .. } => dims,
        }
    }

    pub fn into_float(self) -> Result<Tensor<f32>> {
        match self {
            Volume::Float(t) => Ok(t),
            Volume::Labels { .. } => Err(Error::Format {
                what: WHAT,
                reason: "expected a float32 volume, found labels".into(),
            }),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels { dims, data } => {
                let dims: [usize; 3] = dims.as_slice().try_into().map_err(|_| Error::Format {
                    what: WHAT,
                    reason: format!("label volume must have rank 3, got {}", dims.len()),
                })?;
                Ok(LabelVolume { dims, data })
            }
            Volume::Float(_) => Err(Error::Format {
                what: WHAT,
                reason: "expected a label volume, found float32".into(),
            }),
        }
    }
}

impl From<Tensor<f32>> for Volume {
    fn from(t: Tensor<f32>) -> Self {
        Volume::Float(t)
    }
}

impl From<LabelVolume> for Volume {
    fn from(l: LabelVolume) -> Self {
        Volume::Labels {
            dims: l.dims.to_vec(),
            data: l.data,
        }
    }
}

pub fn encode(volume: &Volume) -> Result<Vec<u8>> {
    let mut w = Writer::new(&MAGIC, VERSION);
    match volume {
        Volume::Float(t) => {
            w.u8(DTYPE_F32);
            w.dims(WHAT, t.shape())?;
            w.f32s(t.data());
        }
        Volume::Labels { dims, data } => {
            if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
                return Err(Error::InvalidShape {
                    shape: dims.clone(),
                    reason: format!("label data has {} elements", data.len()),
                });
            }
            w.u8(DTYPE_U8);
            w.dims(WHAT, dims)?;
            w.bytes(data);
        }
    }
    Ok(w.finish())
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::open(WHAT, bytes, &MAGIC, VERSION)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(r.format_error(format!("unknown dtype code {dtype}")));
    }
    let (dims, count) = r.dims()?;
    let volume = if dtype == DTYPE_F32 {
        Volume::Float(Tensor::new(dims, r.f32s(count)?)?)
    } else {
        Volume::Labels {
            dims,
            data: r.take(count)?.to_vec(),
        }
    };
    r.finish()?;
    Ok(volume)
}

pub fn write(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    fs::write(path, encode(volume)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
    decode(&fs::read(path)?)
}
