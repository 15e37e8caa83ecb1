//! Volumetric images and clinical metadata on disk.
//!
//! RVOL is the canonical interchange container; a read-only subset of
//! single-file NIfTI-1 is accepted for real scanner data.

mod metadata;
mod nifti;
mod rvol;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use metadata::{read_metadata_csv, write_metadata_csv, Resection, SubjectRecord};
pub use nifti::{decode_nifti, read_nifti_subset};
pub use rvol::{
    decode_rvol, encode_rvol, read_rvol, write_rvol, RVOL_HEADER_LEN, RVOL_MAGIC, RVOL_VERSION,
};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: u64, actual: u64 },
    #[error("unsupported feature in field `{field}`: {reason}")]
    Unsupported { field: &'static str, reason: String },
    #[error("metadata line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("invalid volume: {0}")]
    Invalid(String),
}

impl VolumeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Extents of a volume, slowest axis first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

impl FromStr for Dims {
    type Err = String;

    /// Parses `DEPTHxHEIGHTxWIDTH`, e.g. `50x64x64`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(format!("expected DEPTHxHEIGHTxWIDTH, got `{s}`"));
        }
        let mut out = [0usize; 3];
        for (slot, part) in out.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| format!("`{part}` is not a positive integer"))?;
            if *slot == 0 {
                return Err(format!("zero extent in `{s}`"));
            }
        }
        Ok(Self::new(out[0], out[1], out[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            Self::U8 => 0,
            Self::F32 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// A 3-D scalar grid; voxel `(d, h, w)` sits at `(d·H + h)·W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: VolumeData,
}

impl Volume {
    pub fn new(dims: Dims, data: VolumeData) -> Result<Self> {
        let len = match &data {
            VolumeData::U8(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        };
        if dims.depth == 0 || dims.height == 0 || dims.width == 0 {
            return Err(VolumeError::Invalid(format!("zero extent in {dims}")));
        }
        if len != dims.voxels() {
            return Err(VolumeError::Invalid(format!(
                "{dims} needs {} voxels, got {len}",
                dims.voxels()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_u8(dims: Dims, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, VolumeData::U8(data))
    }

    pub fn from_f32(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, VolumeData::F32(data))
    }

    pub fn from_fn_f32(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.voxels());
        for d in 0..dims.depth {
            for h in 0..dims.height {
                for w in 0..dims.width {
                    data.push(f(d, h, w));
                }
            }
        }
        Self {
            dims,
            data: VolumeData::F32(data),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            VolumeData::U8(_) => DType::U8,
            VolumeData::F32(_) => DType::F32,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VolumeData::U8(v) => Some(v),
            VolumeData::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Some(v),
            VolumeData::U8(_) => None,
        }
    }

    /// Voxel values widened to `f32` (u8 values keep their 0–255 scale).
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::F32(v) => v.clone(),
        }
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims.height + h) * self.dims.width + w
    }

    pub fn get_f32(&self, d: usize, h: usize, w: usize) -> f32 {
        let i = self.index(d, h, w);
        match &self.data {
            VolumeData::U8(v) => v[i] as f32,
            VolumeData::F32(v) => v[i],
        }
    }
}
