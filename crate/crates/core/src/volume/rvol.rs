//! RVOL container: a 20-byte little-endian header followed by raw voxels.
//!
//! ```text
//! 0   "RVOL"
//! 4   u8  version (1)
//! 5   u8  dtype (0 = u8, 1 = f32)
//! 6   2 reserved zero bytes
//! 8   u32 depth, u32 height, u32 width
//! 20  voxel data in (d·H + h)·W + w order
//! ```

use std::fs;
use std::path::Path;

use super::{DType, Dims, Result, Volume, VolumeData, VolumeError};

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u8 = 1;
pub const RVOL_HEADER_LEN: usize = 20;

pub fn encode_rvol(volume: &Volume) -> Vec<u8> {
    let dims = volume.dims();
    let mut out = Vec::with_capacity(RVOL_HEADER_LEN + dims.voxels() * volume.dtype().size());
    out.extend_from_slice(RVOL_MAGIC);
    out.push(RVOL_VERSION);
    out.push(volume.dtype().code());
    out.extend_from_slice(&[0, 0]);
    for extent in dims.as_array() {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    match volume.data() {
        VolumeData::U8(v) => out.extend_from_slice(v),
        VolumeData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_rvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(VolumeError::Length {
            expected: RVOL_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != RVOL_MAGIC {
        return Err(VolumeError::Format {
            offset: 0,
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        });
    }
    if bytes[4] != RVOL_VERSION {
        return Err(VolumeError::Format {
            offset: 4,
            reason: format!("unsupported version {}", bytes[4]),
        });
    }
    let dtype = match bytes[5] {
        0 => DType::U8,
        1 => DType::F32,
        code => {
            return Err(VolumeError::Format {
                offset: 5,
                reason: format!("unknown dtype code {code}"),
            })
        }
    };
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(VolumeError::Format {
            offset: 6,
            reason: "reserved bytes must be zero".into(),
        });
    }
    let extent = |at: usize| -> Result<usize> {
        let v = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if v == 0 {
            return Err(VolumeError::Format {
                offset: at as u64,
                reason: "zero extent".into(),
            });
        }
        Ok(v as usize)
    };
    let dims = Dims::new(extent(8)?, extent(12)?, extent(16)?);
    let payload = &bytes[RVOL_HEADER_LEN..];
    let expected = dims.voxels() * dtype.size();
    if payload.len() != expected {
        return Err(VolumeError::Length {
            expected: (RVOL_HEADER_LEN + expected) as u64,
            actual: bytes.len() as u64,
        });
    }
    let data = match dtype {
        DType::U8 => VolumeData::U8(payload.to_vec()),
        DType::F32 => VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Volume::new(dims, data)
}

pub fn read_rvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    decode_rvol(&bytes)
}

pub fn write_rvol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_rvol(volume)).map_err(|e| VolumeError::io(path, e))
}
