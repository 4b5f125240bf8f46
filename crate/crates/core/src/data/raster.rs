use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"AMRD";
pub const RASTER_VERSION: u8 = 1;
/// magic(4) + version(1) + dtype(1) + channels(1) + height(4) + width(4)
pub const RASTER_HEADER_LEN: usize = 15;

/// Channel-first pixel buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Pixels {
    pub fn len(&self) -> usize {
        match self {
            Pixels::U8(v) => v.len(),
            Pixels::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Pixels::U8(_) => 0,
            Pixels::F32(_) => 1,
        }
    }
}

/// `channels × height × width` image stored row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Pixels,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Pixels) -> Result<Self> {
        if channels == 0 || channels > u8::MAX as usize {
            return Err(Error::Data(format!("raster channel count {channels} outside 1..=255")));
        }
        if height > u32::MAX as usize || width > u32::MAX as usize {
            return Err(Error::Data(format!("raster extent {height}×{width} exceeds u32")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Data(format!(
                "raster {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn u8(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(channels, height, width, Pixels::U8(data))
    }

    pub fn f32(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(channels, height, width, Pixels::F32(data))
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.pixels {
            Pixels::U8(v) => Ok(v),
            Pixels::F32(_) => Err(Error::Data("expected a u8 raster, found f32".into())),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.pixels {
            Pixels::F32(v) => Ok(v),
            Pixels::U8(_) => Err(Error::Data("expected an f32 raster, found u8".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + self.pixels.len() * 4);
        out.extend_from_slice(RASTER_MAGIC);
        out.push(RASTER_VERSION);
        out.push(self.pixels.dtype_code());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        match &self.pixels {
            Pixels::U8(v) => out.extend_from_slice(v),
            Pixels::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < RASTER_HEADER_LEN {
            return Err(fmt(
                bytes.len(),
                format!("truncated header: expected {RASTER_HEADER_LEN} bytes, got {}", bytes.len()),
            ));
        }
        if &bytes[..4] != RASTER_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}, expected \"AMRD\"", &bytes[..4])));
        }
        if bytes[4] != RASTER_VERSION {
            return Err(Error::Version(format!(
                "raster version {} unsupported (expected {RASTER_VERSION})",
                bytes[4]
            )));
        }
        let dtype = bytes[5];
        let channels = bytes[6] as usize;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (height, width) = (u32_at(7), u32_at(11));
        let n = channels * height * width;
        let elem = match dtype {
            0 => 1,
            1 => 4,
            other => return Err(fmt(5, format!("unknown dtype code {other}"))),
        };
        let payload = &bytes[RASTER_HEADER_LEN..];
        if payload.len() != n * elem {
            return Err(fmt(
                RASTER_HEADER_LEN + payload.len().min(n * elem),
                format!("payload length mismatch: expected {} bytes, got {}", n * elem, payload.len()),
            ));
        }
        let pixels = match dtype {
            0 => Pixels::U8(payload.to_vec()),
            _ => Pixels::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Self::new(channels, height, width, pixels).map_err(|e| fmt(6, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}
